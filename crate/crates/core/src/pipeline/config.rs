use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cma::{DEFAULT_TOKENS, TOKEN_COUNTS};
use crate::error::{Error, Result};
use crate::numerics::LN_EPS;
use crate::pointcloud::NeighborhoodQuery;

/// Which gated streams take part. Image features are always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityToggles {
    pub lidar: bool,
    pub occ: bool,
    pub desc: bool,
}

impl Default for ModalityToggles {
    fn default() -> Self {
        Self {
            lidar: true,
            occ: true,
            desc: true,
        }
    }
}

impl ModalityToggles {
    pub fn as_mask(&self) -> [bool; 3] {
        [self.lidar, self.occ, self.desc]
    }

    pub fn label(&self) -> String {
        let mut parts = vec!["image"];
        for (on, name) in [(self.lidar, "lidar"), (self.occ, "occ"), (self.desc, "desc")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleToggles {
    pub tmm: bool,
    pub cma: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self { tmm: true, cma: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaConfig {
    pub num_tokens: usize,
    pub heads: usize,
    /// Skip the check that `num_tokens` is one of 8/16/24/32.
    pub allow_any_token_count: bool,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            num_tokens: DEFAULT_TOKENS,
            heads: 2,
            allow_any_token_count: false,
        }
    }
}

/// Feature widths and token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    pub latent: usize,
    pub question: usize,
    pub lidar: usize,
    pub occ: usize,
    pub desc: usize,
    pub image_tokens: usize,
    pub question_tokens: usize,
    pub lidar_tokens: usize,
    pub occ_tokens: usize,
    pub desc_tokens: usize,
    pub classes: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            latent: 16,
            question: 8,
            lidar: 12,
            occ: 10,
            desc: 14,
            image_tokens: 4,
            question_tokens: 3,
            lidar_tokens: 4,
            occ_tokens: 4,
            desc_tokens: 4,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 0.01,
            schedule: Schedule::Cosine,
            epochs: 200,
            batch_size: 16,
        }
    }
}

/// Synthetic routing task sizes and noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Std of the per-token noise around each class prototype.
    pub feature_noise: f64,
    /// Std of the question noise around its one-hot routing channel.
    pub question_noise: f64,
    /// Std of the image features.
    pub image_scale: f64,
    /// Fill the non-relevant modalities with prototypes of unrelated labels
    /// instead of plain noise.
    pub distractors: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            train_samples: 240,
            test_samples: 240,
            feature_noise: 0.3,
            question_noise: 0.1,
            image_scale: 0.3,
            distractors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub modalities: ModalityToggles,
    pub modules: ModuleToggles,
    pub cma: CmaConfig,
    pub dims: Dims,
    pub optimizer: OptimizerConfig,
    pub task: TaskConfig,
    pub ln_eps: f64,
    /// Add a bias to the gate predictor.
    pub predictor_bias: bool,
    pub normals: NeighborhoodQuery,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            modalities: ModalityToggles::default(),
            modules: ModuleToggles::default(),
            cma: CmaConfig::default(),
            dims: Dims::default(),
            optimizer: OptimizerConfig::default(),
            task: TaskConfig::default(),
            ln_eps: LN_EPS,
            predictor_bias: false,
            normals: NeighborhoodQuery::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.modalities.as_mask().iter().any(|&m| m) {
            return Err(Error::Config(
                "at least one of lidar/occ/desc must be enabled alongside image".into(),
            ));
        }
        let k = self.cma.num_tokens;
        if k == 0 {
            return Err(Error::Config("cma.num_tokens must be positive".into()));
        }
        if !self.cma.allow_any_token_count && !TOKEN_COUNTS.contains(&k) {
            return Err(Error::Config(format!(
                "cma.num_tokens = {k} is not one of {TOKEN_COUNTS:?}; set cma.allow_any_token_count to override"
            )));
        }
        let d = &self.dims;
        if self.cma.heads == 0 || d.latent % self.cma.heads != 0 {
            return Err(Error::Config(format!(
                "latent dim {} is not divisible by {} heads",
                d.latent, self.cma.heads
            )));
        }
        let sizes = [
            d.latent, d.question, d.lidar, d.occ, d.desc, d.image_tokens, d.question_tokens,
            d.lidar_tokens, d.occ_tokens, d.desc_tokens,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("all dims and token counts must be positive".into()));
        }
        if d.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if d.question < 3 {
            return Err(Error::Config("question dim must hold the three routing channels".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0) || !(o.weight_decay >= 0.0) || o.batch_size == 0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.task.train_samples == 0 || self.task.test_samples == 0 {
            return Err(Error::Config("task needs train and test samples".into()));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        NeighborhoodQuery::new(self.normals.radius, self.normals.k_max)?;
        Ok(())
    }

    /// Parses TOML or JSON by file extension (`.toml`, otherwise JSON).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
