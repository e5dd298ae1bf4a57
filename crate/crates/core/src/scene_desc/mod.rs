//! Two-stage scene description.
//!
//! Stage one prompts a vision-language endpoint once per camera view. Stage
//! two folds every successful per-view description into a scene-level prompt
//! for a language endpoint. Both stages go through [`GenerationClient`], so
//! the endpoints can be real, cached, recorded, replayed or mocked.

mod client;
pub mod http;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    request_key, CachingClient, FixtureClient, GenerationClient, GenerationError,
    GenerationRequest, MockClient, RecordingClient, Transcript, TranscriptEntry,
};
pub use http::{EndpointConfig, HttpClient, RetryPolicy};

pub const DEFAULT_VIEW_TEMPLATE: &str = include_str!("../../templates/view_prompt.txt");
pub const DEFAULT_SCENE_TEMPLATE: &str = include_str!("../../templates/scene_prompt.txt");
pub const DEFAULT_PARALLELISM: usize = 3;

const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "jpeg", "png", "webp", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Bytes(Vec<u8>),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub name: String,
    pub image: ImageSource,
}

/// Ordered, uniquely named camera views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSet(Vec<View>);

impl ViewSet {
    pub fn new(views: Vec<View>) -> Result<Self, OrchestrationError> {
        if views.is_empty() {
            return Err(OrchestrationError::InvalidViews("need at least one view".into()));
        }
        let mut seen = HashSet::new();
        for v in &views {
            if !seen.insert(v.name.as_str()) {
                return Err(OrchestrationError::InvalidViews(format!("duplicate view name {:?}", v.name)));
            }
        }
        Ok(Self(views))
    }

    /// Image files in `dir`, sorted by file name; each view is named after
    /// its file stem.
    pub fn from_dir(dir: &Path) -> Result<Self, OrchestrationError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(GenerationError::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        let views = files
            .into_iter()
            .map(|p| View {
                name: p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
                image: ImageSource::Path(p),
            })
            .collect();
        Self::new(views)
    }

    pub fn views(&self) -> &[View] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Prompt templates. `{view}` in a view template is replaced by the view
/// name; `{descriptions}` and `{count}` in the scene template by the
/// formatted per-view descriptions and their number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub view: String,
    #[serde(default)]
    pub view_overrides: BTreeMap<String, String>,
    pub scene: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            view: DEFAULT_VIEW_TEMPLATE.to_string(),
            view_overrides: BTreeMap::new(),
            scene: DEFAULT_SCENE_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `view_prompt.txt` and `scene_prompt.txt` from `dir`, keeping
    /// the defaults for any that are missing. `view_prompt.<name>.txt`
    /// overrides the template for one view.
    pub fn from_dir(dir: &Path) -> Result<Self, GenerationError> {
        let mut t = Self::default();
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).ok();
        if let Some(v) = read("view_prompt.txt") {
            t.view = v;
        }
        if let Some(s) = read("scene_prompt.txt") {
            t.scene = s;
        }
        for entry in std::fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(view) = name.strip_prefix("view_prompt.").and_then(|n| n.strip_suffix(".txt")) {
                if let Some(text) = read(&name) {
                    t.view_overrides.insert(view.to_string(), text);
                }
            }
        }
        Ok(t)
    }

    pub fn view_prompt(&self, view: &str) -> String {
        self.view_overrides
            .get(view)
            .unwrap_or(&self.view)
            .replace("{view}", view)
    }
}

/// Scene-level prompt. Each description appears verbatim under a
/// `[view name]` line, in view order.
pub fn assemble_scene_prompt(per_view: &[(String, String)], template: &str) -> String {
    let mut block = String::new();
    for (name, text) in per_view {
        block.push_str(&format!("[{name}]\n{text}\n\n"));
    }
    template
        .replace("{count}", &per_view.len().to_string())
        .replace("{descriptions}", &block)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewText {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub client: String,
    pub views: usize,
    pub failed_views: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_unix_ms: Option<u128>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix_ms: Option<u128>,
}

/// Output document: `{views: [{name, text}], scene, meta}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub views: Vec<ViewText>,
    pub scene: String,
    pub meta: Provenance,
}

impl SceneDescription {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene description serializes") + "\n"
    }
}

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("invalid view set: {0}")]
    InvalidViews(String),

    #[error("all {} view descriptions failed; first error: {}", .0.len(), .0.first().map(|v| v.error.clone().unwrap_or_default()).unwrap_or_default())]
    AllViewsFailed(Vec<ViewText>),

    #[error("scene summary failed: {source}")]
    Summary {
        source: GenerationError,
        partials: Vec<ViewText>,
    },

    #[error(transparent)]
    Generation(#[from] GenerationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescribeOptions {
    /// Views in flight at once.
    pub parallelism: usize,
    pub record_timestamps: bool,
}

impl Default for DescribeOptions {
    fn default() -> Self {
        Self {
            parallelism: DEFAULT_PARALLELISM,
            record_timestamps: true,
        }
    }
}

async fn load_image(source: &ImageSource) -> Result<Vec<u8>, GenerationError> {
    match source {
        ImageSource::Bytes(b) => Ok(b.clone()),
        ImageSource::Path(p) => Ok(tokio::fs::read(p).await?),
    }
}

/// One result per view, in view order. Errors are per view; the call only
/// fails as a whole when every view fails.
pub async fn describe_views<C: GenerationClient + ?Sized>(
    views: &ViewSet,
    templates: &PromptTemplates,
    client: &C,
    parallelism: usize,
) -> Result<Vec<ViewText>, OrchestrationError> {
    let results: Vec<ViewText> = stream::iter(views.views())
        .map(|view| async move {
            let outcome = async {
                let image = load_image(&view.image).await?;
                let request = GenerationRequest {
                    prompt: templates.view_prompt(&view.name),
                    image: Some(image),
                    view: Some(view.name.clone()),
                    context: Vec::new(),
                };
                client.generate(&request).await
            }
            .await;
            match outcome {
                Ok(text) => ViewText {
                    name: view.name.clone(),
                    text: Some(text),
                    error: None,
                },
                Err(e) => ViewText {
                    name: view.name.clone(),
                    text: None,
                    error: Some(e.to_string()),
                },
            }
        })
        // buffered, not buffer_unordered: output order follows input order
        .buffered(parallelism.max(1))
        .collect()
        .await;
    if results.iter().all(|r| r.text.is_none()) {
        return Err(OrchestrationError::AllViewsFailed(results));
    }
    Ok(results)
}

/// Scene description from the successful per-view texts.
pub async fn summarize_scene<C: GenerationClient + ?Sized>(
    per_view: &[(String, String)],
    scene_template: &str,
    client: &C,
) -> Result<String, GenerationError> {
    if per_view.is_empty() {
        return Err(GenerationError::Config("no view descriptions to summarize".into()));
    }
    let request = GenerationRequest {
        prompt: assemble_scene_prompt(per_view, scene_template),
        image: None,
        view: None,
        context: per_view.iter().map(|(_, t)| t.clone()).collect(),
    };
    client.generate(&request).await
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or_default()
}

/// Runs both stages. The view client and scene client may differ.
pub async fn describe_scene<V, S>(
    views: &ViewSet,
    templates: &PromptTemplates,
    view_client: &V,
    scene_client: &S,
    options: DescribeOptions,
) -> Result<SceneDescription, OrchestrationError>
where
    V: GenerationClient + ?Sized,
    S: GenerationClient + ?Sized,
{
    let started = options.record_timestamps.then(now_ms);
    let per_view = describe_views(views, templates, view_client, options.parallelism).await?;
    let ok: Vec<(String, String)> = per_view
        .iter()
        .filter_map(|v| v.text.clone().map(|t| (v.name.clone(), t)))
        .collect();
    let scene = match summarize_scene(&ok, &templates.scene, scene_client).await {
        Ok(s) => s,
        Err(source) => {
            return Err(OrchestrationError::Summary {
                source,
                partials: per_view,
            })
        }
    };
    let failed = per_view.len() - ok.len();
    let client = if view_client.id() == scene_client.id() {
        view_client.id()
    } else {
        format!("{}+{}", view_client.id(), scene_client.id())
    };
    Ok(SceneDescription {
        meta: Provenance {
            client,
            views: per_view.len(),
            failed_views: failed,
            started_unix_ms: started,
            finished_unix_ms: options.record_timestamps.then(now_ms),
        },
        views: per_view,
        scene,
    })
}
