use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use mmdrive::numerics::Matrix;
use mmdrive::pipeline::ablate::{run_ablation, AblationGroup};
use mmdrive::pipeline::feature::{read_feature, write_feature, FeatureHeader, FeatureModality};
use mmdrive::pipeline::gradsuite::{run_suite, worst};
use mmdrive::pipeline::model::{Model, RawSample};
use mmdrive::pipeline::{train_toy, RunConfig};
use mmdrive::pointcloud::io::{read_cloud, write_normals, CloudFormat};
use mmdrive::pointcloud::{estimate_normals, estimate_normals_oracle, NeighborhoodQuery};
use mmdrive::scene_desc::{
    describe_scene, CachingClient, DescribeOptions, EndpointConfig, FixtureClient, GenerationClient, HttpClient,
    MockClient, PromptTemplates, RecordingClient, ViewSet,
};
use mmdrive::{Error, Result};

const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "mmdrive", version, about = "Question-conditioned multimodal fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-point normals and write `x y z nx ny nz` rows.
    Normals(NormalsArgs),
    /// Run TMM and CMA on one sample's feature files.
    Fuse(FuseArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the toy decoder on the synthetic routing task.
    TrainToy(TrainArgs),
    /// Describe a scene from its camera views.
    Describe(DescribeArgs),
    /// Run the token-count, modality and module ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct NormalsArgs {
    /// ASCII `x y z` rows or a binary MMPC file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 16)]
    kmax: usize,
    #[arg(long)]
    output: PathBuf,
    /// Use exhaustive neighbor search and the Jacobi eigensolver.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Holds image/lidar/occ/desc/question `.mmdf` files.
    #[arg(long)]
    sample_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trained model JSON as written by `train-toy --model-out`.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the trained model as JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    /// Directory of view images; the file stem names the view.
    #[arg(long)]
    views_dir: PathBuf,
    /// Offline deterministic client.
    #[arg(long, conflicts_with_all = ["endpoint", "replay"])]
    mock: bool,
    /// Base URL of an OpenAI-compatible API. Defaults to MMDRIVE_GEN_URL.
    #[arg(long, conflicts_with = "replay")]
    endpoint: Option<String>,
    /// Model name. Defaults to MMDRIVE_GEN_MODEL.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    /// Answer from a recorded transcript instead of a live endpoint.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Save every exchange to a transcript.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Directory with view_prompt.txt, scene_prompt.txt or
    /// view_prompt.<view>.txt overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = mmdrive::scene_desc::DEFAULT_PARALLELISM)]
    parallelism: usize,
    /// Include wall-clock timestamps in the output.
    #[arg(long)]
    timestamps: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subset of tokens, modalities, modules. Defaults to all three.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<String>,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn normals(a: NormalsArgs) -> Result<()> {
    let (cloud, format) = read_cloud(&a.input)?;
    let q = NeighborhoodQuery::new(a.radius, a.kmax)?;
    let out = if a.oracle {
        estimate_normals_oracle(&cloud, &q)?
    } else {
        estimate_normals(&cloud, &q)?
    };
    write_normals(&a.output, &out, format)?;
    let invalid = out.valid.iter().filter(|v| !**v).count();
    let kind = match format {
        CloudFormat::Ascii => "ascii",
        CloudFormat::Binary => "binary",
    };
    println!("points {}  invalid {invalid}  format {kind}", out.len());
    Ok(())
}

fn read_modality(dir: &Path, m: FeatureModality) -> Result<(FeatureHeader, Matrix)> {
    let path = dir.join(format!("{}.mmdf", m.file_stem()));
    let (h, x) = read_feature(&path)?;
    if h.modality != m {
        return Err(Error::Validation(format!(
            "{} declares modality {:?}",
            path.display(),
            h.modality
        )));
    }
    Ok((h, x))
}

fn fuse(a: FuseArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let model: Model = match &a.params {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            Model::new(&config, &mut rng)?
        }
    };
    let (header, image) = read_modality(&a.sample_dir, FeatureModality::Image)?;
    let sample = RawSample {
        image,
        lidar: read_modality(&a.sample_dir, FeatureModality::Lidar)?.1,
        occ: read_modality(&a.sample_dir, FeatureModality::Occ)?.1,
        desc: read_modality(&a.sample_dir, FeatureModality::Desc)?.1,
        question: read_modality(&a.sample_dir, FeatureModality::Question)?.1,
    };
    let p = model.predict(&sample, &Model::control(&config), config.modules.cma)?;
    std::fs::create_dir_all(&a.out)?;
    let id = header.sample_id;
    let write = |m: FeatureModality, x: &Matrix| {
        let path = a.out.join(format!("{}.mmdf", m.file_stem()));
        write_feature(&path, &FeatureHeader::new(m, id.clone(), x.shape()), x)
    };
    write(FeatureModality::Fused, &p.fused)?;
    if let Some(f_a) = &p.abstraction {
        write(FeatureModality::Abstract, f_a)?;
        let seq = model.assemble(&sample.question, f_a, &p.fused)?;
        println!("sequence rows {}", seq.len());
    }
    let w = p.weights;
    let summary = serde_json::json!({
        "sample_id": id,
        "weights": {"lidar": w[0], "occ": w[1], "desc": w[2]},
        "abstract_shape": p.abstraction.as_ref().map(|m| [m.rows(), m.cols()]),
        "fused_shape": [p.fused.rows(), p.fused.cols()],
        "logits": p.logits,
        "class": p.class,
    });
    std::fs::write(a.out.join("weights.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("omega lidar {:.6} occ {:.6} desc {:.6} sum {:.6}", w[0], w[1], w[2], w.iter().sum::<f64>());
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let results = run_suite(seed)?;
    for r in &results {
        println!("{:<22} max rel error {:.3e}  ({} entries)", r.name, r.max_rel_error, r.checked);
    }
    let w = worst(&results);
    println!("max rel error {w:.3e}");
    Ok(w < GRAD_TOLERANCE)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let (report, model) = train_toy(&config)?;
    print!("{}", report.to_text());
    if let Some(p) = a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(p) = a.model_out {
        std::fs::write(p, serde_json::to_string(&model)? + "\n")?;
    }
    Ok(())
}

fn describe(a: DescribeArgs) -> Result<()> {
    if !a.views_dir.is_dir() {
        return Err(Error::Validation(format!("{} is not a directory", a.views_dir.display())));
    }
    let views = ViewSet::from_dir(&a.views_dir)?;
    let templates = match &a.templates {
        Some(d) => PromptTemplates::from_dir(d)?,
        None => PromptTemplates::default(),
    };
    let mut client: Arc<dyn GenerationClient> = if a.mock {
        Arc::new(MockClient)
    } else if let Some(p) = &a.replay {
        Arc::new(FixtureClient::load(p)?)
    } else {
        let mut cfg = match &a.endpoint {
            Some(url) => {
                let model = a
                    .model
                    .clone()
                    .or_else(|| std::env::var(mmdrive::scene_desc::http::ENV_MODEL).ok())
                    .ok_or_else(|| Error::Usage("--model or MMDRIVE_GEN_MODEL is required".into()))?;
                let mut c = EndpointConfig::new(url.clone(), model);
                c.token = std::env::var(mmdrive::scene_desc::http::ENV_TOKEN).ok().filter(|t| !t.is_empty());
                c
            }
            None => EndpointConfig::from_env()?,
        };
        if let Some(m) = &a.model {
            cfg.model = m.clone();
        }
        cfg.timeout = Duration::from_secs_f64(a.timeout_secs);
        Arc::new(HttpClient::new(cfg)?)
    };
    if let Some(dir) = &a.cache_dir {
        client = Arc::new(CachingClient::new(client, dir)?);
    }
    let recorder = a.record.as_ref().map(|_| Arc::new(RecordingClient::new(client.clone())));
    if let Some(r) = &recorder {
        client = r.clone();
    }
    let options = DescribeOptions {
        parallelism: a.parallelism.max(1),
        record_timestamps: a.timestamps,
    };
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let result = runtime.block_on(describe_scene(&views, &templates, &client, &client, options));
    if let (Some(r), Some(p)) = (&recorder, &a.record) {
        r.transcript().save(p)?;
    }
    let doc = result?.to_json();
    match &a.out {
        Some(p) => std::fs::write(p, doc)?,
        None => print!("{doc}"),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let groups = if a.groups.is_empty() {
        AblationGroup::ALL.to_vec()
    } else {
        a.groups
            .iter()
            .map(|g| match g.as_str() {
                "tokens" => Ok(AblationGroup::Tokens),
                "modalities" => Ok(AblationGroup::Modalities),
                "modules" => Ok(AblationGroup::Modules),
                other => Err(Error::Usage(format!("unknown ablation group {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?
    };
    let report = run_ablation(&config, &groups)?;
    print!("{}", report.to_text());
    if let Some(p) = a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Normals(a) => normals(a),
        Command::Fuse(a) => fuse(a),
        Command::Gradcheck { seed } => match gradcheck(seed) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Validation(format!("gradient error above {GRAD_TOLERANCE:e}"))),
            Err(e) => Err(e),
        },
        Command::TrainToy(a) => train(a),
        Command::Describe(a) => describe(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
