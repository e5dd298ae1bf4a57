//! Feature files, run configuration, sequence assembly, the toy decoder and
//! its training loop, and the ablation grid.

pub mod ablate;
pub mod config;
pub mod feature;
pub mod gradsuite;
pub mod model;
pub mod sequence;
pub mod task;
pub mod train;

pub use ablate::{run_ablation, AblationGroup, AblationReport, AblationRow};
pub use config::RunConfig;
pub use feature::{read_feature, write_feature, FeatureHeader, FeatureModality};
pub use model::{Model, Prediction, RawSample};
pub use sequence::{assemble_sequence, AssembledSequence, Marker, SpecialTokens};
pub use train::{train_toy, TrainReport};
