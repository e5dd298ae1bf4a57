use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("transport error after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("no recorded response for request {key}")]
    MissingFixture { key: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GenerationError {
    pub fn status(&self) -> Option<u16> {
        match self {
            GenerationError::Transport { status, .. } => *status,
            _ => None,
        }
    }
}

/// One text-generation call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub image: Option<Vec<u8>>,
    /// View being described, for stage-one calls.
    pub view: Option<String>,
    /// Per-view descriptions folded into a stage-two prompt.
    pub context: Vec<String>,
}

impl GenerationRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            ..Self::default()
        }
    }
}

/// A text generator behind a vision-language or language model endpoint.
/// Implementations must tolerate concurrent calls.
#[async_trait]
pub trait GenerationClient: Send + Sync {
    /// Stable identifier, used in cache keys and provenance.
    fn id(&self) -> String;

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError>;
}

#[async_trait]
impl<T: GenerationClient + ?Sized> GenerationClient for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        (**self).generate(request).await
    }
}

/// Deterministic offline client. Stage-one calls answer `DESC(<view>)`,
/// stage-two calls answer the descriptions joined by `" | "`, anything else
/// echoes the prompt.
#[derive(Debug, Clone, Default)]
pub struct MockClient;

#[async_trait]
impl GenerationClient for MockClient {
    fn id(&self) -> String {
        "mock".into()
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        Ok(match (&request.view, request.context.is_empty()) {
            (Some(view), _) => format!("DESC({view})"),
            (None, false) => request.context.join(" | "),
            (None, true) => request.prompt.clone(),
        })
    }
}

/// Hex SHA-256 over the model id, prompt and image bytes, each
/// length-prefixed.
pub fn request_key(model: &str, request: &GenerationRequest) -> String {
    let mut h = Sha256::new();
    for part in [model.as_bytes(), request.prompt.as_bytes(), request.image.as_deref().unwrap_or(&[])] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

/// Disk cache in front of another client, one file per request key.
pub struct CachingClient<C> {
    inner: C,
    dir: PathBuf,
}

impl<C: GenerationClient> CachingClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>) -> Result<Self, GenerationError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    fn path_for(&self, request: &GenerationRequest) -> PathBuf {
        self.dir.join(format!("{}.txt", request_key(&self.inner.id(), request)))
    }
}

#[async_trait]
impl<C: GenerationClient> GenerationClient for CachingClient<C> {
    fn id(&self) -> String {
        self.inner.id()
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let path = self.path_for(request);
        if let Ok(hit) = tokio::fs::read_to_string(&path).await {
            return Ok(hit);
        }
        let text = self.inner.generate(request).await?;
        // write-then-rename so a concurrent reader never sees half a file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        tokio::fs::write(&tmp, &text).await?;
        tokio::fs::rename(&tmp, &path).await?;
        Ok(text)
    }
}

/// Recorded request/response pairs keyed by [`request_key`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub model: String,
    pub entries: BTreeMap<String, TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub response: String,
}

impl Transcript {
    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GenerationError::Protocol(format!("bad transcript: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), GenerationError> {
        let text = serde_json::to_string_pretty(self).expect("transcript serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Replays a [`Transcript`]; unknown requests fail.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    transcript: Transcript,
}

impl FixtureClient {
    pub fn new(transcript: Transcript) -> Self {
        Self { transcript }
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        Ok(Self::new(Transcript::load(path)?))
    }
}

#[async_trait]
impl GenerationClient for FixtureClient {
    fn id(&self) -> String {
        self.transcript.model.clone()
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let key = request_key(&self.transcript.model, request);
        self.transcript
            .entries
            .get(&key)
            .map(|e| e.response.clone())
            .ok_or(GenerationError::MissingFixture { key })
    }
}

/// Passes calls through and records every successful exchange.
pub struct RecordingClient<C> {
    inner: C,
    transcript: Mutex<Transcript>,
}

impl<C: GenerationClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        let model = inner.id();
        Self {
            inner,
            transcript: Mutex::new(Transcript {
                model,
                entries: BTreeMap::new(),
            }),
        }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }
}

#[async_trait]
impl<C: GenerationClient> GenerationClient for RecordingClient<C> {
    fn id(&self) -> String {
        self.inner.id()
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let response = self.inner.generate(request).await?;
        let key = request_key(&self.inner.id(), request);
        self.transcript.lock().expect("transcript lock").entries.insert(
            key,
            TranscriptEntry {
                prompt: request.prompt.clone(),
                response: response.clone(),
            },
        );
        Ok(response)
    }
}
