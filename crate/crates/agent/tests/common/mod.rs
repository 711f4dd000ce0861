#![allow(dead_code)]

use std::sync::Mutex;

use asd_agent::assessor::{Verdict, VerdictSource};
use asd_agent::evolution::LearningRunConfig;
use asd_agent::gateway::{Backend, BackendKind, ChatRequest, Gateway, GatewayError, TemplateId};
use asd_agent::library::{Lineage, SkillOption};
use asd_core::dsl::FunctionSource;
use asd_core::sim::EnvConfig;
use asd_core::trainer::{init_policy, FeatureMap, TrainConfig, TrainStats, ACT_DIM};
use asd_core::TabletopEnv;

type Answer = dyn Fn(&ChatRequest, usize) -> String + Send + Sync;

/// Backend answering through a closure of (request, sample index) and
/// keeping every request it saw.
pub struct FnBackend {
    answer: Box<Answer>,
    pub seen: Mutex<Vec<ChatRequest>>,
}

impl Backend for FnBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        self.seen.lock().unwrap().push(req.clone());
        Ok((0..req.n).map(|i| (self.answer)(req, i)).collect())
    }
}

/// A gateway over [`FnBackend`] plus a handle to the requests it logged.
pub struct Probe {
    pub gateway: Gateway,
    seen: std::sync::Arc<FnBackend>,
}

struct Shared(std::sync::Arc<FnBackend>);

impl Backend for Shared {
    fn kind(&self) -> BackendKind {
        self.0.kind()
    }
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        self.0.complete(req)
    }
}

impl Probe {
    pub fn new(answer: impl Fn(&ChatRequest, usize) -> String + Send + Sync + 'static) -> Self {
        let backend = std::sync::Arc::new(FnBackend { answer: Box::new(answer), seen: Mutex::new(Vec::new()) });
        Self { gateway: Gateway::new(Box::new(Shared(backend.clone()))), seen: backend }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.seen.lock().unwrap().clone()
    }

    /// Completions served for one template (each sample counts).
    pub fn completions_for(&self, t: TemplateId) -> usize {
        self.requests().iter().filter(|r| r.template == t).map(|r| r.n).sum()
    }
}

pub fn fenced(body: &str) -> String {
    format!("Here it is.\n```\n{body}\n```\n")
}

pub fn env() -> TabletopEnv {
    TabletopEnv::new(EnvConfig::default()).unwrap()
}

/// A learning config with a tiny trainer so runs take milliseconds.
pub fn quick_config() -> LearningRunConfig {
    LearningRunConfig {
        train: TrainConfig {
            population: 8,
            envs_per_rollout: 8,
            episode_budget: 120,
            eval_episodes: 10,
            ..TrainConfig::default()
        },
        ..LearningRunConfig::default()
    }
}

pub fn verdict(success: bool) -> Verdict {
    Verdict { success, rationale: "test".into(), source: VerdictSource::Oracle }
}

/// A hand-made option; `seed` makes the weights distinct.
pub fn option(reward: &str, success: &str, rate: f64, ok: bool, seed: u64) -> SkillOption {
    let env = env();
    let mut policy = init_policy(FeatureMap::input_dim_for(env.schema()), ACT_DIM, seed, None).unwrap();
    policy.observed = vec!["cubeA_pos".into()];
    SkillOption {
        policy,
        reward: FunctionSource::reward(reward),
        success: FunctionSource::success(success),
        stats: TrainStats { eval_success_rate: rate, success_positive: rate > 0.0, ..TrainStats::default() },
        verdict: verdict(ok),
        lineage: Lineage { run_id: "test".into(), success_index: 0, generation: 0, candidate_index: 0, parent: None },
    }
}
