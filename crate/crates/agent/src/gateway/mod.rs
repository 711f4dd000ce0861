//! Access to the proposal/coding model and the assessment model.
//!
//! Every request goes through [`Gateway::complete`], which counts
//! completions with an atomic counter and appends request and response to an
//! optional JSON-lines transcript. Three backends exist: a live HTTP client,
//! a strict fixture replayer, and a recorder that answers from a script and
//! writes the fixtures the replayer later reads.

mod backend;
mod templates;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backend::{FixtureKey, LiveBackend, LiveConfig, RecordingBackend, ScriptRule, ScriptedBackend, Script};
pub use templates::{render_prompt, with_rejection, PromptTemplate, TemplateId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Scripted,
    Recording,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot render template {template}: {message}")]
    Render { template: TemplateId, message: String },
    #[error("no fixture for template {template}, prompt hash {hash}, sample {index}")]
    FixtureMissing { template: TemplateId, hash: String, index: usize },
    #[error("no script rule answers template {template} (prompt hash {hash})")]
    ScriptMissing { template: TemplateId, hash: String },
    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("fixture i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub text: String,
    pub n: usize,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(template: TemplateId, text: impl Into<String>, n: usize, temperature: f64) -> Self {
        Self { template, text: text.into(), n, temperature }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    /// Value of the gateway's completion counter after this request.
    pub call_counter: u64,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

/// Something that turns a prompt into `n` completions.
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError>;
}

/// First 16 hex digits of the SHA-256 of the rendered prompt.
pub fn prompt_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Serialize)]
struct TranscriptEntry<'a> {
    counter: u64,
    template: TemplateId,
    hash: String,
    n: usize,
    temperature: f64,
    prompt: &'a str,
    completions: &'a [String],
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    completions: AtomicU64,
    transcript: Option<Mutex<BufWriter<File>>>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self { backend, completions: AtomicU64::new(0), transcript: None }
    }

    /// Appends every exchange to `path` (JSON lines).
    pub fn with_transcript(mut self, path: &Path) -> Result<Self, GatewayError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| GatewayError::Io { path: path.to_path_buf(), source })?;
        self.transcript = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    /// Completions served so far. Each sample of a request counts once, so
    /// the counter measures model calls in the usual one-sample-per-call
    /// sense.
    pub fn calls(&self) -> u64 {
        self.completions.load(Ordering::SeqCst)
    }

    /// Restores the counter when a run resumes from a checkpoint.
    pub fn restore_calls(&self, value: u64) {
        self.completions.store(value, Ordering::SeqCst);
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if req.n == 0 {
            return Err(GatewayError::Config("sample count must be at least 1".into()));
        }
        if !(req.temperature >= 0.0 && req.temperature.is_finite()) {
            return Err(GatewayError::Config("temperature must be finite and non-negative".into()));
        }
        let started = Instant::now();
        let completions = self.backend.complete(req)?;
        if completions.len() != req.n {
            return Err(GatewayError::Response(format!("expected {} completions, got {}", req.n, completions.len())));
        }
        let counter = self.completions.fetch_add(req.n as u64, Ordering::SeqCst) + req.n as u64;
        if let Some(t) = &self.transcript {
            let entry = TranscriptEntry {
                counter,
                template: req.template,
                hash: prompt_hash(&req.text),
                n: req.n,
                temperature: req.temperature,
                prompt: &req.text,
                completions: &completions,
            };
            let line = serde_json::to_string(&entry).map_err(|e| GatewayError::Response(e.to_string()))?;
            let mut w = t.lock().expect("transcript lock poisoned");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|source| GatewayError::Io {
                path: PathBuf::from("<transcript>"),
                source,
            })?;
        }
        Ok(ChatResponse {
            completions,
            call_counter: counter,
            latency_ms: started.elapsed().as_millis() as u64,
            backend: self.backend.kind(),
        })
    }
}

/// Bodies of the fenced code blocks in `text`, in order. An info string
/// after the opening fence is ignored; an unterminated block runs to the end.
pub fn extract_code_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(body), true) => {
                blocks.push(body.join("\n"));
                current = None;
            }
            (Some(body), false) => body.push(line),
            (None, false) => {}
        }
    }
    if let Some(body) = current {
        blocks.push(body.join("\n"));
    }
    blocks
}
