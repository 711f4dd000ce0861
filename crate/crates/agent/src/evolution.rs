//! Evolutionary search for reward functions.
//!
//! For one task the language model first writes `S` success functions,
//! which stay frozen for the whole run. Under each of them, `G` generations
//! of `R` reward functions are trained; the candidate with the highest
//! evaluation success rate survives (lowest index on ties), its statistics
//! or error become the feedback for the next generation, and, if it is
//! fast-positive, the assessor judges a recorded behavior of its policy.
//! Verified survivors become skill options; rejected ones are archived as
//! candidates.

use std::collections::BTreeMap;
use std::sync::Arc;

use asd_core::dsl::{CheckedFn, Diagnostic, FnKind, FunctionSource, GRAMMAR_DOC};
use asd_core::num::mix_seed;
use asd_core::trainer::{rollout, train, TrainConfig, TrainRequest, TrainStats};
use asd_core::{PolicyParams, SceneState, TabletopEnv};
use serde::{Deserialize, Serialize};

use crate::assessor::{assess, summarize_keyframes, AssessError, AssessMode, BehaviorRecord, Verdict, DEFAULT_KEYFRAMES};
use crate::gateway::{extract_code_blocks, render_prompt, with_rejection, ChatRequest, Gateway, GatewayError, TemplateId};
use crate::library::{jaccard, CandidateEntry, Lineage, PolicyRef, SkillLibrary, SkillOption};

const BEHAVIOR_STREAM: u64 = 0x6265_6861_7669_6f72;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRunConfig {
    /// Success functions sampled per task (S).
    pub success_samples: usize,
    /// Reward functions sampled per generation (R).
    pub reward_samples: usize,
    /// Generations of reward evolution per success function (G).
    pub generations: usize,
    /// Extra single-sample requests allowed to replace unusable samples,
    /// per sampling step.
    pub resample_cap: usize,
    pub temperature: f64,
    /// Put verified functions of similar skills into generation prompts.
    pub rag: bool,
    pub rag_k: usize,
    /// Stop at the first verified option (used to count minimal calls).
    pub stop_on_first: bool,
    /// Whether a survivor the assessor rejected still seeds the next
    /// generation's feedback prompt.
    pub feedback_from_rejected: bool,
    pub keyframes: usize,
    pub assess_mode: AssessMode,
    pub train: TrainConfig,
}

impl Default for LearningRunConfig {
    fn default() -> Self {
        Self {
            success_samples: 3,
            reward_samples: 3,
            generations: 3,
            resample_cap: 5,
            temperature: 1.0,
            rag: true,
            rag_k: 3,
            stop_on_first: false,
            feedback_from_rejected: true,
            keyframes: DEFAULT_KEYFRAMES,
            assess_mode: AssessMode::Oracle,
            train: TrainConfig::default(),
        }
    }
}

impl LearningRunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.success_samples == 0 || self.reward_samples == 0 || self.generations == 0 {
            return Err("success_samples, reward_samples and generations must be at least 1".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err("temperature must be finite and non-negative".into());
        }
        self.train.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("success_fn_unobtainable: {}", .diagnostics.join("; "))]
    SuccessFnUnobtainable { diagnostics: Vec<String> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Assess(#[from] AssessError),
    #[error("training setup: {0}")]
    Train(String),
    #[error("invalid learning config: {0}")]
    Config(String),
}

/// Index of the fittest candidate: highest evaluation success rate, with
/// errored candidates ranked at -1 and ties going to the lowest index.
pub fn select_survivor(fitness: &[Option<f64>]) -> Option<usize> {
    let score = |f: &Option<f64>| f.unwrap_or(-1.0);
    let mut best: Option<usize> = None;
    for (i, f) in fitness.iter().enumerate() {
        if best.is_none_or(|b| score(f) > score(&fitness[b])) {
            best = Some(i);
        }
    }
    best
}

/// One retrieved skill: its name, similarity to the query and the function
/// sources of its best option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagHit {
    pub skill: String,
    pub score: f64,
    pub success: FunctionSource,
    pub reward: FunctionSource,
}

/// Skills whose description shares words with `task`, best first (ties
/// keep library order), at most `k` of them.
pub fn skill_rag_retrieve(task: &str, library: &SkillLibrary, k: usize) -> Vec<RagHit> {
    let mut scored: Vec<(f64, usize)> = library
        .skills
        .iter()
        .enumerate()
        .map(|(i, s)| (jaccard(task, &s.description), i))
        .filter(|(score, _)| *score > 0.0)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(k)
        .filter_map(|(score, i)| {
            let skill = &library.skills[i];
            let o = &skill.options[skill.best_option()?];
            Some(RagHit { skill: skill.description.clone(), score, success: o.success.clone(), reward: o.reward.clone() })
        })
        .collect()
}

/// Hints as interpolated into generation prompts.
pub fn render_rag_hints(hits: &[RagHit]) -> String {
    if hits.is_empty() {
        return "none".to_string();
    }
    hits.iter()
        .map(|h| {
            format!(
                "- \"{}\" (similarity {:.2})\n  success: {}\n  reward: {}",
                h.skill,
                h.score,
                h.success.text.trim(),
                h.reward.text.trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_list(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
    }
}

/// Statistics fed back to the model after a generation.
pub fn render_stats(stats: &TrainStats) -> String {
    let curve = |v: &[f64], digits: usize| v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(", ");
    let mut out = vec![
        format!("evaluation success rate: {:.2}", stats.eval_success_rate),
        format!("success observed at any step: {}", if stats.success_positive { "yes" } else { "no" }),
        format!("training success rate per iteration: [{}]", curve(&stats.success_rate_curve, 2)),
        format!("mean return per iteration: [{}]", curve(&stats.mean_return_curve, 2)),
    ];
    if let Some(best) = stats.best_return_curve.last() {
        out.push(format!("best return: {best:.2}"));
    }
    out.join("\n")
}

/// Tally of generated samples for the syntax-error metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub total: usize,
    pub invalid: usize,
}

impl SampleCounts {
    fn add(&mut self, other: SampleCounts) {
        self.total += other.total;
        self.invalid += other.invalid;
    }
}

/// Outcome of asking for `n` functions of one kind, resampling unusable ones.
struct Sampled {
    fns: Vec<CheckedFn>,
    counts: SampleCounts,
    diagnostics: Vec<String>,
}

fn check_completion(text: &str, kind: FnKind, env: &TabletopEnv) -> Result<CheckedFn, String> {
    let Some(block) = extract_code_blocks(text).into_iter().next() else {
        return Err("the answer contains no fenced code block".into());
    };
    CheckedFn::new(FunctionSource::new(block, kind), env.schema()).map_err(|d: Diagnostic| d.to_string())
}

fn sample_functions(
    gateway: &Gateway,
    env: &TabletopEnv,
    template: TemplateId,
    prompt: &str,
    n: usize,
    kind: FnKind,
    config: &LearningRunConfig,
) -> Result<Sampled, GatewayError> {
    let mut out = Sampled { fns: Vec::new(), counts: SampleCounts::default(), diagnostics: Vec::new() };
    let first = gateway.complete(&ChatRequest::new(template, prompt, n, config.temperature))?;
    let mut last_error = None;
    for text in &first.completions {
        out.counts.total += 1;
        match check_completion(text, kind, env) {
            Ok(f) => out.fns.push(f),
            Err(e) => {
                out.counts.invalid += 1;
                out.diagnostics.push(e.clone());
                last_error = Some(e);
            }
        }
    }
    let mut attempt = 0;
    while out.fns.len() < n && attempt < config.resample_cap {
        attempt += 1;
        let reason = last_error.clone().unwrap_or_default();
        let retry = with_rejection(prompt, attempt, &reason);
        let resp = gateway.complete(&ChatRequest::new(template, retry, 1, config.temperature))?;
        out.counts.total += 1;
        match check_completion(&resp.completions[0], kind, env) {
            Ok(f) => out.fns.push(f),
            Err(e) => {
                out.counts.invalid += 1;
                out.diagnostics.push(e.clone());
                last_error = Some(e);
            }
        }
    }
    Ok(out)
}

/// One trained reward candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub success_index: usize,
    pub generation: usize,
    pub index: usize,
    pub seed: u64,
    pub reward: FunctionSource,
    pub success: FunctionSource,
    /// The frozen success function object this candidate trained with.
    #[serde(skip)]
    pub success_fn: Option<Arc<CheckedFn>>,
    pub stats: TrainStats,
    pub fast_verdict: bool,
    /// Assessor verdict; only survivors that are fast-positive get one.
    pub slow_verdict: Option<Verdict>,
    pub behavior: Option<BehaviorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub candidates: Vec<CandidateRecord>,
    pub survivor: Option<usize>,
    /// Feedback handed to the next generation ("" for the last one).
    pub feedback: String,
    pub samples: SampleCounts,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineageReport {
    pub success_index: usize,
    pub success: FunctionSource,
    /// Whether the start state already satisfies this success function.
    pub satisfied_at_start: bool,
    pub generations: Vec<GenerationRecord>,
}

/// Everything one learning run produced, for the per-task report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub run_id: String,
    pub seed: u64,
    pub rag_hints: Vec<RagHit>,
    pub success_samples: SampleCounts,
    pub success_diagnostics: Vec<String>,
    pub lineages: Vec<LineageReport>,
    pub options: usize,
    pub candidates: usize,
    /// Gateway completions used by this run.
    pub calls: u64,
    /// Completions used up to and including the first verified option.
    pub calls_to_first_option: Option<u64>,
    pub stopped_early: bool,
}

impl RunReport {
    pub fn all_candidates(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.lineages.iter().flat_map(|l| l.generations.iter()).flat_map(|g| g.candidates.iter())
    }

    pub fn survivors(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.lineages
            .iter()
            .flat_map(|l| l.generations.iter())
            .filter_map(|g| g.survivor.map(|s| &g.candidates[s]))
    }

    pub fn sample_counts(&self) -> SampleCounts {
        let mut c = self.success_samples;
        for g in self.lineages.iter().flat_map(|l| l.generations.iter()) {
            c.add(g.samples);
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureInfo {
    pub reason: String,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SkillOutcome {
    pub task: String,
    pub options: Vec<SkillOption>,
    pub candidates: Vec<CandidateEntry>,
    pub failure: Option<FailureInfo>,
    pub report: RunReport,
}

impl SkillOutcome {
    /// Writes the outcome into `library`: verified options join the skill,
    /// rejected behaviors are archived, and a run without options lands in
    /// the failure pool. Returns how many options were added.
    pub fn commit(&self, library: &mut SkillLibrary) -> Result<usize, crate::library::LibraryError> {
        for o in &self.options {
            library.add_option(&self.task, o.clone())?;
        }
        for c in &self.candidates {
            library.record_candidate(c.clone());
        }
        if let Some(f) = &self.failure {
            library.record_failure(&self.task, &f.reason, f.diagnostics.clone());
        }
        Ok(self.options.len())
    }

    /// Index of the best new option (highest evaluation rate, earliest on ties).
    pub fn best_option(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, o) in self.options.iter().enumerate() {
            if best.is_none_or(|b| o.stats.eval_success_rate > self.options[b].stats.eval_success_rate) {
                best = Some(i);
            }
        }
        best
    }
}

/// Shared, read-only context of a learning run.
pub struct LearnContext<'a> {
    pub env: &'a TabletopEnv,
    pub gateway: &'a Gateway,
    pub library: &'a SkillLibrary,
    pub run_id: &'a str,
    pub seed: u64,
}

/// Optional chaining inputs: a start state to train from and a policy to
/// start the search at.
#[derive(Debug, Clone, Copy, Default)]
pub struct LearnStart<'a> {
    pub warm_start: Option<(&'a PolicyParams, &'a PolicyRef)>,
    pub reset_override: Option<&'a SceneState>,
    pub precedent_skills: &'a [String],
}

fn base_context(ctx: &LearnContext<'_>, task: &str, start: &LearnStart<'_>, hints: &str) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("task", task.to_string()),
        ("schema", ctx.env.schema().text().to_string()),
        ("grammar", GRAMMAR_DOC.to_string()),
        ("precedent_skills", render_list(start.precedent_skills)),
        ("rag_hints", hints.to_string()),
    ])
}

/// Learns `task`: samples and freezes success functions, evolves reward
/// functions under each, and assesses every fast-positive survivor.
pub fn learn_skill(
    ctx: &LearnContext<'_>,
    task: &str,
    config: &LearningRunConfig,
    start: LearnStart<'_>,
) -> Result<SkillOutcome, LearnError> {
    config.validate().map_err(LearnError::Config)?;
    let calls_before = ctx.gateway.calls();
    let hits = if config.rag { skill_rag_retrieve(task, ctx.library, config.rag_k) } else { Vec::new() };
    let hints = render_rag_hints(&hits);

    let prompt = render_prompt(TemplateId::SuccessFn, &base_context(ctx, task, &start, &hints))?;
    let sampled = sample_functions(
        ctx.gateway,
        ctx.env,
        TemplateId::SuccessFn,
        &prompt,
        config.success_samples,
        FnKind::Success,
        config,
    )?;
    if sampled.fns.len() < config.success_samples {
        return Err(LearnError::SuccessFnUnobtainable { diagnostics: sampled.diagnostics });
    }
    let success_fns: Vec<Arc<CheckedFn>> = sampled.fns.into_iter().map(Arc::new).collect();

    let behavior_start = match start.reset_override {
        Some(s) => s.clone(),
        None => ctx.env.sample_reset(mix_seed(ctx.seed, BEHAVIOR_STREAM)),
    };
    let start_obs = ctx.env.observe(&behavior_start);
    let parent = start.warm_start.map(|(_, r)| r.clone());

    let mut report = RunReport {
        task: task.to_string(),
        run_id: ctx.run_id.to_string(),
        seed: ctx.seed,
        rag_hints: hits,
        success_samples: sampled.counts,
        success_diagnostics: sampled.diagnostics,
        lineages: Vec::new(),
        options: 0,
        candidates: 0,
        calls: 0,
        calls_to_first_option: None,
        stopped_early: false,
    };
    let mut options = Vec::new();
    let mut candidates = Vec::new();
    let mut errors = Vec::new();

    'lineages: for (si, success) in success_fns.iter().enumerate() {
        let mut lineage = LineageReport {
            success_index: si,
            success: success.source().clone(),
            satisfied_at_start: success.eval_success(&start_obs).unwrap_or(false),
            generations: Vec::new(),
        };
        let mut ctx_map = base_context(ctx, task, &start, &hints);
        ctx_map.insert("success_fn", success.source().text.clone());
        let mut feedback: Option<(TemplateId, String)> = None;

        for generation in 0..config.generations {
            let (template, prompt) = match &feedback {
                None => (TemplateId::RewardFn, render_prompt(TemplateId::RewardFn, &ctx_map)?),
                Some((t, p)) => (*t, p.clone()),
            };
            let sampled =
                sample_functions(ctx.gateway, ctx.env, template, &prompt, config.reward_samples, FnKind::Reward, config)?;
            let mut record = GenerationRecord {
                generation,
                candidates: Vec::new(),
                survivor: None,
                feedback: String::new(),
                samples: sampled.counts,
                diagnostics: sampled.diagnostics,
            };
            let mut trained: Vec<(CandidateRecord, PolicyParams)> = Vec::new();
            for (j, reward) in sampled.fns.iter().enumerate() {
                let seed = mix_seed(ctx.seed, ((si * config.generations + generation) * config.reward_samples + j) as u64);
                let req = TrainRequest {
                    warm_start: start.warm_start.map(|(p, _)| p),
                    reset_override: start.reset_override,
                    seed,
                };
                let (policy, stats) =
                    train(ctx.env, &config.train, reward, success, req).map_err(|e| LearnError::Train(e.to_string()))?;
                if let Some(e) = &stats.error {
                    errors.push(e.to_string());
                }
                let fast = stats.error.is_none() && stats.eval_success_rate > 0.0;
                trained.push((
                    CandidateRecord {
                        success_index: si,
                        generation,
                        index: j,
                        seed,
                        reward: reward.source().clone(),
                        success: success.source().clone(),
                        success_fn: Some(Arc::clone(success)),
                        stats,
                        fast_verdict: fast,
                        slow_verdict: None,
                        behavior: None,
                    },
                    policy,
                ));
            }
            let fitness: Vec<Option<f64>> = trained
                .iter()
                .map(|(c, _)| if c.stats.error.is_some() { None } else { Some(c.stats.eval_success_rate) })
                .collect();
            record.survivor = select_survivor(&fitness);
            let mut verified = false;
            let mut rejected = false;
            if let Some(s) = record.survivor {
                let (cand, policy) = &mut trained[s];
                if cand.fast_verdict {
                    let reward = &sampled.fns[s];
                    let traj = rollout(ctx.env, policy, std::slice::from_ref(&behavior_start), reward, success, ctx.env.horizon())
                        .map_err(|d| LearnError::Train(d.to_string()))?
                        .remove(0);
                    let behavior = summarize_keyframes(ctx.env, task, &traj, config.keyframes);
                    let verdict = assess(ctx.env, &behavior, config.assess_mode, Some(ctx.gateway))?;
                    let lineage_info = Lineage {
                        run_id: ctx.run_id.to_string(),
                        success_index: si,
                        generation,
                        candidate_index: s,
                        parent: parent.clone(),
                    };
                    if verdict.success {
                        verified = true;
                        options.push(SkillOption {
                            policy: policy.clone(),
                            reward: cand.reward.clone(),
                            success: cand.success.clone(),
                            stats: cand.stats.clone(),
                            verdict: verdict.clone(),
                            lineage: lineage_info,
                        });
                    } else {
                        rejected = true;
                        candidates.push(CandidateEntry {
                            task: crate::library::normalize_name(task),
                            description: task.trim().to_string(),
                            reward: cand.reward.clone(),
                            success: cand.success.clone(),
                            eval_success_rate: cand.stats.eval_success_rate,
                            verdict: verdict.clone(),
                            lineage: lineage_info,
                        });
                    }
                    cand.slow_verdict = Some(verdict);
                    cand.behavior = Some(behavior);
                }
            }

            let last = generation + 1 == config.generations;
            if !last {
                feedback = match record.survivor {
                    Some(s) if !(rejected && !config.feedback_from_rejected) => {
                        let (cand, _) = &trained[s];
                        let mut m = ctx_map.clone();
                        m.remove("precedent_skills");
                        m.remove("rag_hints");
                        m.insert("previous_reward", cand.reward.text.clone());
                        let t = match &cand.stats.error {
                            Some(e) => {
                                m.insert("error", e.to_string());
                                TemplateId::RewardFeedbackError
                            }
                            None => {
                                m.insert("stats", render_stats(&cand.stats));
                                TemplateId::RewardFeedbackStats
                            }
                        };
                        Some((t, render_prompt(t, &m)?))
                    }
                    _ => None,
                };
                record.feedback = feedback.as_ref().map(|(_, p)| p.clone()).unwrap_or_default();
            }
            let no_candidates = trained.is_empty();
            record.candidates = trained.into_iter().map(|(c, _)| c).collect();
            lineage.generations.push(record);
            if verified && report.calls_to_first_option.is_none() {
                report.calls_to_first_option = Some(ctx.gateway.calls() - calls_before);
                if config.stop_on_first {
                    report.stopped_early = true;
                    report.lineages.push(lineage);
                    break 'lineages;
                }
            }
            if no_candidates {
                // nothing usable came back even after resampling
                break;
            }
        }
        report.lineages.push(lineage);
    }

    report.options = options.len();
    report.candidates = candidates.len();
    report.calls = ctx.gateway.calls() - calls_before;
    let failure = if options.is_empty() {
        let reason = if !candidates.is_empty() {
            "every fast-positive behavior was rejected by the assessor"
        } else if report.survivors().any(|c| c.fast_verdict) {
            "no verified behavior"
        } else {
            "no reward function produced a successful policy"
        };
        let mut diagnostics = errors;
        for l in &report.lineages {
            for g in &l.generations {
                diagnostics.extend(g.diagnostics.iter().cloned());
            }
        }
        diagnostics.dedup();
        Some(FailureInfo { reason: reason.to_string(), diagnostics })
    } else {
        None
    };
    Ok(SkillOutcome { task: task.to_string(), options, candidates, failure, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survivor_table() {
        assert_eq!(select_survivor(&[Some(0.2), Some(0.9), Some(0.5)]), Some(1));
        assert_eq!(select_survivor(&[Some(0.7), Some(0.7)]), Some(0));
        assert_eq!(select_survivor(&[None, Some(0.0)]), Some(1));
        assert_eq!(select_survivor(&[]), None);
    }
}
