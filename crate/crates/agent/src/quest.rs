//! Long-horizon quests: decompose into subtasks, run the known ones, learn
//! the missing ones on demand from the state the chain has reached.

use std::collections::BTreeMap;

use asd_core::dsl::{CheckedFn, FunctionSource};
use asd_core::num::mix_seed;
use asd_core::trainer::rollout;
use asd_core::{PolicyParams, SceneState, TabletopEnv};
use serde::{Deserialize, Serialize};

use crate::assessor::oracle_for;
use crate::evolution::{learn_skill, LearnContext, LearnError, LearnStart, LearningRunConfig, RunReport};
use crate::gateway::{render_prompt, with_rejection, ChatRequest, Gateway, GatewayError, TemplateId};
use crate::library::{jaccard, normalize_name, LibraryError, PolicyRef, SkillLibrary};

const QUEST_STREAM: u64 = 0x71_7565_7374;

/// Word-overlap above which a non-matching subtask is flagged as a likely
/// rewording of an existing skill.
pub const NEAR_MATCH_SIMILARITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestOrigin {
    Human,
    FailurePool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quest {
    pub instruction: String,
    pub origin: QuestOrigin,
}

impl Quest {
    pub fn new(instruction: &str, origin: QuestOrigin) -> Result<Self, QuestError> {
        let instruction = instruction.trim();
        if instruction.is_empty() {
            return Err(QuestError::EmptyInstruction);
        }
        Ok(Self { instruction: instruction.to_string(), origin })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "skill")]
pub enum Disposition {
    KnownSkill(String),
    ToLearn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub text: String,
    pub disposition: Disposition,
    /// For a subtask to learn: an existing skill with a similar name, shown
    /// to the operator but never executed in its place.
    pub near_match: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskPlan {
    pub quest: Quest,
    pub subtasks: Vec<Subtask>,
}

#[derive(Debug, thiserror::Error)]
pub enum QuestError {
    #[error("quest instruction is empty")]
    EmptyInstruction,
    #[error("no usable plan after {attempts} attempt(s)")]
    Unparseable { attempts: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("stored skill '{skill}' no longer checks: {message}")]
    StoredFunction { skill: String, message: String },
}

/// Subtasks of a numbered list (`1. ...` or `1) ...`), in order. Other
/// lines are ignored; trailing periods are dropped.
pub fn parse_plan(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            let digits = line.bytes().take_while(u8::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = line[digits..].strip_prefix('.').or_else(|| line[digits..].strip_prefix(')'))?;
            let item = rest.trim().trim_end_matches('.').trim();
            (!item.is_empty()).then(|| item.to_string())
        })
        .collect()
}

/// Matches each subtask against the library by normalized name.
pub fn classify(subtasks: Vec<String>, library: &SkillLibrary) -> Vec<Subtask> {
    subtasks
        .into_iter()
        .map(|text| match library.skill(&text) {
            Some(skill) => Subtask { text, disposition: Disposition::KnownSkill(skill.name.clone()), near_match: None },
            None => {
                let near = library
                    .skills
                    .iter()
                    .map(|s| (jaccard(&text, &s.description), &s.name))
                    .filter(|(score, _)| *score >= NEAR_MATCH_SIMILARITY)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, n)| n.clone());
                Subtask { text, disposition: Disposition::ToLearn, near_match: near }
            }
        })
        .collect()
}

/// Asks the model for a subtask list, resampling (up to `resample_cap`
/// times) when no numbered list comes back.
pub fn decompose(
    gateway: &Gateway,
    env: &TabletopEnv,
    quest: &Quest,
    library: &SkillLibrary,
    config: &LearningRunConfig,
) -> Result<SubtaskPlan, QuestError> {
    let ctx = BTreeMap::from([
        ("quest", quest.instruction.clone()),
        ("schema", env.schema().text().to_string()),
        ("library_context", library.proposal_context()),
    ]);
    let prompt = render_prompt(TemplateId::QuestDecomposition, &ctx)?;
    let mut text = prompt.clone();
    for attempt in 0..=config.resample_cap {
        if attempt > 0 {
            text = with_rejection(&prompt, attempt, "the answer contained no numbered list of subtasks");
        }
        let resp = gateway.complete(&ChatRequest::new(TemplateId::QuestDecomposition, text.as_str(), 1, config.temperature))?;
        let items = parse_plan(&resp.completions[0]);
        if !items.is_empty() {
            return Ok(SubtaskPlan { quest: quest.clone(), subtasks: classify(items, library) });
        }
    }
    Err(QuestError::Unparseable { attempts: config.resample_cap + 1 })
}

/// How one step of the chain went.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub text: String,
    pub disposition: Disposition,
    /// State the step started from (the previous step's terminal state).
    pub start_state: SceneState,
    pub terminal_state: Option<SceneState>,
    /// Skill option that was executed.
    pub executed: Option<PolicyRef>,
    pub fast_success: bool,
    /// Oracle judgment of the terminal state, when the task has an oracle.
    pub oracle_success: Option<bool>,
    pub success: bool,
    /// For learned steps: whether every training episode of every candidate
    /// started bit-exactly from `start_state`.
    pub reset_chaining_holds: Option<bool>,
    pub learn_report: Option<RunReport>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestReport {
    pub plan: SubtaskPlan,
    pub steps: Vec<StepReport>,
    pub success: bool,
    pub aborted_at: Option<usize>,
    /// Skills created while executing the quest.
    pub new_skills: Vec<String>,
    pub options_added: usize,
}

impl QuestReport {
    pub fn render(&self) -> String {
        let mut out = vec![format!("quest: {}", self.plan.quest.instruction), "plan:".to_string()];
        for (i, s) in self.plan.subtasks.iter().enumerate() {
            let how = match &s.disposition {
                Disposition::KnownSkill(n) => format!("known skill '{n}'"),
                Disposition::ToLearn => match &s.near_match {
                    Some(n) => format!("to learn (similar to '{n}')"),
                    None => "to learn".to_string(),
                },
            };
            out.push(format!("  {}. {} [{how}]", i + 1, s.text));
        }
        out.push("steps:".to_string());
        for s in &self.steps {
            let oracle = match s.oracle_success {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "-",
            };
            out.push(format!(
                "  {}. {}: {} (fast {}, oracle {oracle}){}",
                s.index + 1,
                s.text,
                if s.success { "ok" } else { "FAILED" },
                if s.fast_success { "pass" } else { "fail" },
                if s.note.is_empty() { String::new() } else { format!(" - {}", s.note) }
            ));
        }
        let delta = if self.new_skills.is_empty() { "none".to_string() } else { self.new_skills.join(", ") };
        out.push(format!("library delta: {} option(s); new skills: {delta}", self.options_added));
        out.push(format!("quest {}", if self.success { "succeeded" } else { "failed" }));
        out.join("\n")
    }
}

/// Everything a quest needs besides the plan.
pub struct QuestContext<'a> {
    pub env: &'a TabletopEnv,
    pub gateway: &'a Gateway,
    pub run_id: &'a str,
    pub seed: u64,
}

struct Executed {
    terminal: SceneState,
    fast: bool,
    oracle: Option<bool>,
}

fn execute_option(
    env: &TabletopEnv,
    task: &str,
    policy: &PolicyParams,
    reward: &FunctionSource,
    success: &FunctionSource,
    start: &SceneState,
) -> Result<Executed, QuestError> {
    let check = |src: &FunctionSource| {
        CheckedFn::new(src.clone(), env.schema())
            .map_err(|d| QuestError::StoredFunction { skill: task.to_string(), message: d.to_string() })
    };
    let (reward, success) = (check(reward)?, check(success)?);
    let traj = rollout(env, policy, std::slice::from_ref(start), &reward, &success, env.horizon())
        .map_err(|d| QuestError::StoredFunction { skill: task.to_string(), message: d.to_string() })?
        .remove(0);
    let terminal = traj.terminal_state;
    let fast = success.eval_success(&env.observe(&terminal)).unwrap_or(false);
    let oracle = oracle_for(task).map(|p| p.holds(env, &terminal));
    Ok(Executed { terminal, fast, oracle })
}

/// Runs the plan step by step from one reset state. Known skills execute
/// their best option; missing skills are learned with the current state as
/// the training reset and the previous step's policy as the warm start,
/// then executed. Stops at the first failing step.
pub fn execute_chain(
    ctx: &QuestContext<'_>,
    plan: &SubtaskPlan,
    library: &mut SkillLibrary,
    config: &LearningRunConfig,
) -> Result<QuestReport, QuestError> {
    let mut state = ctx.env.sample_reset(mix_seed(ctx.seed, QUEST_STREAM));
    let mut previous: Option<(PolicyParams, PolicyRef)> = None;
    let mut precedent: Vec<String> = Vec::new();
    let mut report = QuestReport {
        plan: plan.clone(),
        steps: Vec::new(),
        success: false,
        aborted_at: None,
        new_skills: Vec::new(),
        options_added: 0,
    };

    for (index, sub) in plan.subtasks.iter().enumerate() {
        let mut step = StepReport {
            index,
            text: sub.text.clone(),
            disposition: sub.disposition.clone(),
            start_state: state.clone(),
            terminal_state: None,
            executed: None,
            fast_success: false,
            oracle_success: None,
            success: false,
            reset_chaining_holds: None,
            learn_report: None,
            note: String::new(),
        };
        let chosen = match &sub.disposition {
            Disposition::KnownSkill(name) => library
                .skill(name)
                .and_then(|s| s.best_option().map(|i| (s.name.clone(), i)))
                .ok_or_else(|| format!("skill '{name}' has no options")),
            Disposition::ToLearn => {
                let run_id = format!("{}-step{index}", ctx.run_id);
                let learn_ctx = LearnContext {
                    env: ctx.env,
                    gateway: ctx.gateway,
                    library,
                    run_id: &run_id,
                    seed: mix_seed(ctx.seed, index as u64),
                };
                let start = LearnStart {
                    warm_start: previous.as_ref().map(|(p, r)| (p, r)),
                    reset_override: Some(&state),
                    precedent_skills: &precedent,
                };
                let outcome = learn_skill(&learn_ctx, &sub.text, config, start)?;
                step.reset_chaining_holds = Some(outcome.report.all_candidates().all(|c| {
                    c.stats.distinct_initial_states == 1
                        && c.stats.first_initial_state.as_ref().is_some_and(|s| s.bit_eq(&state))
                }));
                let existed = library.skill(&sub.text).is_some();
                let offset = library.skill(&sub.text).map_or(0, |s| s.options.len());
                let best = outcome.best_option();
                report.options_added += outcome.commit(library)?;
                if !existed && !outcome.options.is_empty() {
                    report.new_skills.push(normalize_name(&sub.text));
                }
                step.learn_report = Some(outcome.report.clone());
                match best {
                    Some(i) => Ok((normalize_name(&sub.text), offset + i)),
                    None => {
                        let reason = outcome.failure.as_ref().map_or("no verified option", |f| f.reason.as_str());
                        library.record_failure(
                            &plan.quest.instruction,
                            &format!("subtask {} '{}' could not be learned", index + 1, sub.text),
                            vec![reason.to_string()],
                        );
                        Err(format!("learning failed: {reason}"))
                    }
                }
            }
        };
        let (skill_name, option) = match chosen {
            Ok(c) => c,
            Err(note) => {
                step.note = note;
                report.steps.push(step);
                report.aborted_at = Some(index);
                return Ok(report);
            }
        };
        let opt = &library.skill(&skill_name).expect("chosen skill exists").options[option];
        let run = execute_option(ctx.env, &sub.text, &opt.policy, &opt.reward, &opt.success, &state)?;
        step.fast_success = run.fast;
        step.oracle_success = run.oracle;
        step.success = run.fast && run.oracle.unwrap_or(true);
        step.terminal_state = Some(run.terminal.clone());
        let policy_ref = PolicyRef { skill: skill_name.clone(), option };
        step.executed = Some(policy_ref.clone());
        if !step.success {
            step.note = "execution did not reach the goal".to_string();
            report.steps.push(step);
            report.aborted_at = Some(index);
            return Ok(report);
        }
        previous = Some((opt.policy.clone(), policy_ref));
        precedent.push(sub.text.clone());
        state = run.terminal;
        report.steps.push(step);
    }
    report.success = !report.steps.is_empty();
    Ok(report)
}
