use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{prompt_hash, Backend, BackendKind, ChatRequest, GatewayError, TemplateId};
use crate::fsutil::write_atomic;

/// Identity of one fixture: which template, which exact prompt, which sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FixtureKey {
    pub template: TemplateId,
    pub hash: String,
    pub index: usize,
}

impl FixtureKey {
    pub fn new(req: &ChatRequest, index: usize) -> Self {
        Self { template: req.template, hash: prompt_hash(&req.text), index }
    }

    pub fn file_name(&self) -> String {
        format!("{}-{}-{}.txt", self.template.name(), self.hash, self.index)
    }

    fn parse_file_name(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".txt")?;
        let (rest, index) = stem.rsplit_once('-')?;
        let (template, hash) = rest.rsplit_once('-')?;
        Some(Self { template: TemplateId::parse(template)?, hash: hash.to_string(), index: index.parse().ok()? })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GatewayError + '_ {
    move |source| GatewayError::Io { path: path.to_path_buf(), source }
}

fn read_fixture_dir(dir: &Path) -> Result<BTreeMap<FixtureKey, String>, GatewayError> {
    let mut map = BTreeMap::new();
    if !dir.exists() {
        return Ok(map);
    }
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(key) = path.file_name().and_then(|n| n.to_str()).and_then(FixtureKey::parse_file_name) else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        map.insert(key, text);
    }
    Ok(map)
}

/// Replays recorded completions. Read-only after loading; a request without
/// a fixture is an error, never a fabricated answer. Temperature is ignored.
pub struct ScriptedBackend {
    fixtures: BTreeMap<FixtureKey, String>,
}

impl ScriptedBackend {
    pub fn load(dir: &Path) -> Result<Self, GatewayError> {
        if !dir.is_dir() {
            return Err(GatewayError::Config(format!("fixture directory {} does not exist", dir.display())));
        }
        Ok(Self { fixtures: read_fixture_dir(dir)? })
    }

    pub fn from_map(fixtures: BTreeMap<FixtureKey, String>) -> Self {
        Self { fixtures }
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        (0..req.n)
            .map(|i| {
                let key = FixtureKey::new(req, i);
                self.fixtures.get(&key).cloned().ok_or(GatewayError::FixtureMissing {
                    template: key.template,
                    hash: key.hash,
                    index: i,
                })
            })
            .collect()
    }
}

/// One answer source of a recording script. A rule applies to requests for
/// its template whose prompt contains every `contains` string; the first
/// applicable rule in file order answers, cycling through its responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub template: String,
    #[serde(default)]
    pub contains: Vec<String>,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default, rename = "rule")]
    pub rules: Vec<ScriptRule>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let script: Script = toml::from_str(text).map_err(|e| GatewayError::Config(format!("script: {e}")))?;
        for (i, r) in script.rules.iter().enumerate() {
            if TemplateId::parse(&r.template).is_none() {
                return Err(GatewayError::Config(format!("script rule {i}: unknown template '{}'", r.template)));
            }
            if r.responses.is_empty() {
                return Err(GatewayError::Config(format!("script rule {i}: no responses")));
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    fn rule_for(&self, req: &ChatRequest) -> Option<usize> {
        self.rules.iter().position(|r| {
            r.template == req.template.name() && r.contains.iter().all(|c| req.text.contains(c.as_str()))
        })
    }
}

struct RecordingState {
    cursors: Vec<usize>,
    served: BTreeMap<FixtureKey, String>,
}

/// Answers from a [`Script`] and writes each answer as a fixture file, so a
/// later run with [`ScriptedBackend`] over the same directory replays it.
/// A prompt seen before (in this run or already on disk) gets the same
/// answer again, which keeps recording and replay consistent.
pub struct RecordingBackend {
    script: Script,
    dir: PathBuf,
    state: Mutex<RecordingState>,
}

impl RecordingBackend {
    pub fn new(script: Script, dir: &Path) -> Result<Self, GatewayError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let served = read_fixture_dir(dir)?;
        let cursors = vec![0; script.rules.len()];
        Ok(Self { script, dir: dir.to_path_buf(), state: Mutex::new(RecordingState { cursors, served }) })
    }
}

impl Backend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Recording
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let mut state = self.state.lock().expect("recording lock poisoned");
        let mut out = Vec::with_capacity(req.n);
        for i in 0..req.n {
            let key = FixtureKey::new(req, i);
            if let Some(text) = state.served.get(&key) {
                out.push(text.clone());
                continue;
            }
            let rule = self
                .script
                .rule_for(req)
                .ok_or_else(|| GatewayError::ScriptMissing { template: req.template, hash: key.hash.clone() })?;
            let responses = &self.script.rules[rule].responses;
            let text = responses[state.cursors[rule] % responses.len()].clone();
            state.cursors[rule] += 1;
            let path = self.dir.join(key.file_name());
            write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
            state.served.insert(key, text.clone());
            out.push(text);
        }
        Ok(out)
    }
}

/// Connection settings of the live backend.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub vision_model: String,
    pub max_attempts: usize,
    pub timeout: Duration,
}

impl LiveConfig {
    pub const ENDPOINT_VAR: &'static str = "ASD_LLM_ENDPOINT";
    pub const KEY_VAR: &'static str = "ASD_LLM_API_KEY";
    pub const MODEL_VAR: &'static str = "ASD_LLM_MODEL";
    pub const VISION_MODEL_VAR: &'static str = "ASD_VLM_MODEL";

    /// Reads the endpoint, key and model names from the environment.
    pub fn from_env() -> Result<Self, GatewayError> {
        let endpoint = std::env::var(Self::ENDPOINT_VAR)
            .map_err(|_| GatewayError::Config(format!("{} is not set", Self::ENDPOINT_VAR)))?;
        let model = std::env::var(Self::MODEL_VAR).unwrap_or_else(|_| "gpt-3.5-turbo".into());
        let vision_model = std::env::var(Self::VISION_MODEL_VAR).unwrap_or_else(|_| model.clone());
        Ok(Self {
            endpoint,
            api_key: std::env::var(Self::KEY_VAR).ok(),
            model,
            vision_model,
            max_attempts: 3,
            timeout: Duration::from_secs(120),
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 1],
    temperature: f64,
    n: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    content: Option<String>,
}

/// Chat-completion client over HTTP. Transport failures, rate limiting and
/// server errors are retried up to `max_attempts` times.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn attempt(&self, url: &str, body: &WireRequest<'_>) -> Result<Vec<String>, (bool, String)> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((false, format!("HTTP {status}: {text}")));
        }
        let parsed: WireResponse = resp.body_mut().read_json().map_err(|e| (false, format!("bad JSON: {e}")))?;
        Ok(parsed.choices.into_iter().map(|c| c.message.content.unwrap_or_default()).collect())
    }
}

impl Backend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let model = if req.template.is_vision() { &self.config.vision_model } else { &self.config.model };
        let body = WireRequest {
            model,
            messages: [WireMessage { role: "user", content: &req.text }],
            temperature: req.temperature,
            n: req.n,
        };
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&url, &body) {
                Ok(v) => return Ok(v),
                Err((retry, msg)) => {
                    last = msg;
                    if !retry {
                        return Err(GatewayError::Transport { attempts: attempt, message: last });
                    }
                }
            }
        }
        Err(GatewayError::Transport { attempts, message: last })
    }
}
