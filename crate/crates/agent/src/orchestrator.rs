//! The outer loop: propose a task, learn it, collect the result, repeat;
//! plus the per-task metrics tables and the skill-RAG ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use asd_core::num::mix_seed;
use asd_core::TabletopEnv;
use serde::{Deserialize, Serialize};

use crate::evolution::{learn_skill, LearnContext, LearnError, LearnStart, LearningRunConfig, RunReport, SampleCounts};
use crate::fsutil::write_atomic;
use crate::gateway::{extract_code_blocks, render_prompt, with_rejection, ChatRequest, Gateway, GatewayError, TemplateId};
use crate::library::{jaccard, normalize_name, LibraryError, SkillLibrary, DUPLICATE_SIMILARITY};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const RUNS_DIR: &str = "runs";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub max_proposals: usize,
    pub seed: u64,
    pub learning: LearningRunConfig,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self { max_proposals: 24, seed: 0, learning: LearningRunConfig::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("no task could be extracted from {attempts} proposal(s)")]
    ProposalUnextractable { attempts: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub task: String,
    /// Still a near-copy of an acquired skill after one resample.
    pub duplicate: bool,
}

/// The task named in a proposal: first line of the first fenced block,
/// without quotes or a trailing period.
pub fn extract_task(text: &str) -> Option<String> {
    let block = extract_code_blocks(text).into_iter().next()?;
    let line = block.lines().map(str::trim).find(|l| !l.is_empty())?;
    let task = line.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim().trim_end_matches('.').trim();
    (!task.is_empty()).then(|| task.to_string())
}

fn duplicate_of(task: &str, library: &SkillLibrary) -> Option<String> {
    let name = normalize_name(task);
    library
        .skills
        .iter()
        .find(|s| s.name == name || jaccard(&s.name, &name) >= DUPLICATE_SIMILARITY)
        .map(|s| s.description.clone())
}

/// Asks for one new task given what the library holds and what failed.
pub fn propose_next_task(
    gateway: &Gateway,
    env: &TabletopEnv,
    library: &SkillLibrary,
    config: &LearningRunConfig,
) -> Result<Proposal, OrchestratorError> {
    let ctx = BTreeMap::from([
        ("schema", env.schema().text().to_string()),
        ("library_context", library.proposal_context()),
    ]);
    let prompt = render_prompt(TemplateId::TaskProposal, &ctx)?;
    let mut text = prompt.clone();
    let mut attempt = 0;
    let mut resampled_duplicate = false;
    loop {
        let resp = gateway.complete(&ChatRequest::new(TemplateId::TaskProposal, text.as_str(), 1, config.temperature))?;
        let reason = match extract_task(&resp.completions[0]) {
            Some(task) => match duplicate_of(&task, library) {
                None => return Ok(Proposal { task, duplicate: false }),
                Some(_) if resampled_duplicate => return Ok(Proposal { task, duplicate: true }),
                Some(existing) => {
                    resampled_duplicate = true;
                    format!("\"{task}\" repeats the acquired skill \"{existing}\"; propose something new")
                }
            },
            None => "the answer contained no task inside a fenced block".to_string(),
        };
        attempt += 1;
        if attempt > config.resample_cap {
            return Err(OrchestratorError::ProposalUnextractable { attempts: attempt });
        }
        text = with_rejection(&prompt, attempt, &reason);
    }
}

/// Per-candidate flags needed by the report metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateFlags {
    pub success_positive: bool,
    pub eval_success_rate: f64,
    pub error: bool,
    pub survivor: bool,
    pub fast_verdict: bool,
    pub slow_verdict: Option<bool>,
}

/// Raw per-task record from which a metrics row is derived.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawRecord {
    pub task: String,
    pub candidates: Vec<CandidateFlags>,
    pub samples: SampleCounts,
    pub options: usize,
    pub archived: usize,
    pub calls: u64,
}

impl RawRecord {
    pub fn from_report(report: &RunReport) -> Self {
        let mut candidates = Vec::new();
        for g in report.lineages.iter().flat_map(|l| l.generations.iter()) {
            for (i, c) in g.candidates.iter().enumerate() {
                candidates.push(CandidateFlags {
                    success_positive: c.stats.success_positive,
                    eval_success_rate: c.stats.eval_success_rate,
                    error: c.stats.error.is_some(),
                    survivor: g.survivor == Some(i),
                    fast_verdict: c.fast_verdict,
                    slow_verdict: c.slow_verdict.as_ref().map(|v| v.success),
                });
            }
        }
        Self {
            task: report.task.clone(),
            candidates,
            samples: report.sample_counts(),
            options: report.options,
            archived: report.candidates,
            calls: report.calls,
        }
    }
}

/// One row of the skill-learning table. Ratios whose denominator is empty
/// are `None` and print as "-".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub sp: Option<f64>,
    pub sr: Option<f64>,
    pub se: Option<f64>,
    pub ee: Option<f64>,
    pub sp_star: Option<f64>,
    pub sr_star: Option<f64>,
    pub sp_v: Option<f64>,
    pub agreement: Option<f64>,
    pub options: usize,
    pub candidates: usize,
    pub calls: u64,
    pub status: String,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn compute_metrics(record: &RawRecord) -> MetricsRow {
    let all = &record.candidates;
    let survivors: Vec<&CandidateFlags> = all.iter().filter(|c| c.survivor).collect();
    let assessed: Vec<&CandidateFlags> = survivors.iter().copied().filter(|c| c.slow_verdict.is_some()).collect();
    MetricsRow {
        task: record.task.clone(),
        sp: ratio(all.iter().filter(|c| c.success_positive).count(), all.len()),
        sr: mean(all.iter().map(|c| c.eval_success_rate)),
        se: ratio(record.samples.invalid, record.samples.total),
        ee: ratio(all.iter().filter(|c| c.error).count(), all.len()),
        sp_star: ratio(survivors.iter().filter(|c| c.success_positive).count(), survivors.len()),
        sr_star: mean(survivors.iter().map(|c| c.eval_success_rate)),
        sp_v: ratio(assessed.iter().filter(|c| c.slow_verdict == Some(true)).count(), assessed.len()),
        agreement: ratio(assessed.iter().filter(|c| c.slow_verdict == Some(c.fast_verdict)).count(), assessed.len()),
        options: record.options,
        candidates: record.archived,
        calls: record.calls,
        status: if record.options > 0 { "acquired".into() } else { "failed".into() },
    }
}

pub fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Aligned text table of metrics rows.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let header = ["#", "task", "S.P.", "S.R.", "S.E.", "E.E.", "S.P.*", "S.R.*", "S.P.v", "A.", "#O.", "#C.", "calls", "status"];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (i, r) in rows.iter().enumerate() {
        table.push(vec![
            (i + 1).to_string(),
            r.task.clone(),
            fmt_ratio(r.sp),
            fmt_ratio(r.sr),
            fmt_ratio(r.se),
            fmt_ratio(r.ee),
            fmt_ratio(r.sp_star),
            fmt_ratio(r.sr_star),
            fmt_ratio(r.sp_v),
            fmt_ratio(r.agreement),
            r.options.to_string(),
            r.candidates.to_string(),
            r.calls.to_string(),
            r.status.clone(),
        ]);
    }
    let widths: Vec<usize> =
        (0..header.len()).map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| if c == 1 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// What happened to one proposed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub index: usize,
    pub task: String,
    pub duplicate: bool,
    pub record: RawRecord,
    pub row: MetricsRow,
    /// Module error that failed the task, if any.
    pub error: Option<String>,
    /// Whether the start state already satisfied one of the sampled
    /// success functions (a sign of an inappropriate proposal).
    pub satisfied_at_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    completed: usize,
    gateway_calls: u64,
    entries: Vec<TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub entries: Vec<TaskEntry>,
    pub skills: usize,
    pub options: usize,
    pub failures: usize,
    pub candidates: usize,
    pub gateway_calls: u64,
}

impl DiscoveryReport {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.entries.iter().map(|e| e.row.clone()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = render_table(&self.rows());
        let flagged: Vec<&TaskEntry> = self.entries.iter().filter(|e| e.duplicate || e.satisfied_at_start || e.error.is_some()).collect();
        for e in flagged {
            let mut notes = Vec::new();
            if e.duplicate {
                notes.push("near-duplicate of an acquired skill".to_string());
            }
            if e.satisfied_at_start {
                notes.push("start state already satisfies a success function".to_string());
            }
            if let Some(err) = &e.error {
                notes.push(err.clone());
            }
            out.push_str(&format!("note {}: {}\n", e.index + 1, notes.join("; ")));
        }
        out.push_str(&format!(
            "skills {}  options {}  candidates {}  failures {}  gateway calls {}\n",
            self.skills, self.options, self.candidates, self.failures, self.gateway_calls
        ));
        out
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OrchestratorError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialise");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io(path))
}

fn load_checkpoint(root: &Path) -> Result<Option<Checkpoint>, OrchestratorError> {
    let path = root.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let cp: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| OrchestratorError::Checkpoint { path: path.clone(), message: e.to_string() })?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(OrchestratorError::Checkpoint { path, message: format!("unsupported checkpoint version {}", cp.version) });
    }
    Ok(Some(cp))
}

fn summarize(entries: &[TaskEntry], library: &SkillLibrary, calls: u64) -> DiscoveryReport {
    DiscoveryReport {
        entries: entries.to_vec(),
        skills: library.len(),
        options: library.option_count(),
        failures: library.failures.len(),
        candidates: library.candidates.len(),
        gateway_calls: calls,
    }
}

pub fn write_reports(root: &Path, report: &DiscoveryReport) -> Result<(), OrchestratorError> {
    write_atomic(&root.join(REPORT_TEXT_FILE), report.render().as_bytes()).map_err(io(root))?;
    write_json(&root.join(REPORT_JSON_FILE), report)
}

pub struct DiscoveryOutcome {
    pub library: SkillLibrary,
    pub report: DiscoveryReport,
}

/// Runs the propose/learn/collect loop, persisting library, per-task run
/// reports and a checkpoint under `root` after every task. An existing
/// checkpoint is resumed. Gateway errors stop the loop (the last checkpoint
/// stays valid); other errors fail only the task at hand.
pub fn discovery_loop(
    env: &TabletopEnv,
    gateway: &Gateway,
    root: &Path,
    config: &DiscoveryConfig,
) -> Result<DiscoveryOutcome, OrchestratorError> {
    config.learning.validate().map_err(OrchestratorError::Config)?;
    std::fs::create_dir_all(root.join(RUNS_DIR)).map_err(io(root))?;
    let mut library = SkillLibrary::load_or_empty(root)?;
    let (mut entries, start) = match load_checkpoint(root)? {
        Some(cp) => {
            gateway.restore_calls(cp.gateway_calls);
            (cp.entries, cp.completed)
        }
        None => (Vec::new(), 0),
    };

    for index in start..config.max_proposals {
        let proposal = propose_next_task(gateway, env, &library, &config.learning)?;
        let run_id = format!("task{:02}", index + 1);
        let ctx = LearnContext { env, gateway, library: &library, run_id: &run_id, seed: mix_seed(config.seed, index as u64) };
        let calls_before = gateway.calls();
        let (record, error, satisfied) = match learn_skill(&ctx, &proposal.task, &config.learning, LearnStart::default()) {
            Ok(outcome) => {
                write_json(&root.join(RUNS_DIR).join(format!("{run_id}.json")), &outcome.report)?;
                outcome.commit(&mut library)?;
                let satisfied = outcome.report.lineages.iter().any(|l| l.satisfied_at_start);
                (RawRecord::from_report(&outcome.report), None, satisfied)
            }
            Err(LearnError::Gateway(e)) => return Err(e.into()),
            Err(e) => {
                let reason = match &e {
                    LearnError::SuccessFnUnobtainable { .. } => "success_fn_unobtainable".to_string(),
                    other => other.to_string(),
                };
                let diagnostics = match &e {
                    LearnError::SuccessFnUnobtainable { diagnostics } => diagnostics.clone(),
                    _ => Vec::new(),
                };
                library.record_failure(&proposal.task, &reason, diagnostics);
                let record = RawRecord { task: proposal.task.clone(), calls: gateway.calls() - calls_before, ..RawRecord::default() };
                (record, Some(e.to_string()), false)
            }
        };
        let row = compute_metrics(&record);
        entries.push(TaskEntry {
            index,
            task: proposal.task,
            duplicate: proposal.duplicate,
            record,
            row,
            error,
            satisfied_at_start: satisfied,
        });
        library.save(root)?;
        let cp = Checkpoint { version: CHECKPOINT_VERSION, completed: index + 1, gateway_calls: gateway.calls(), entries: entries.clone() };
        write_json(&root.join(CHECKPOINT_FILE), &cp)?;
        write_reports(root, &summarize(&entries, &library, gateway.calls()))?;
    }
    library.save(root)?;
    let report = summarize(&entries, &library, gateway.calls());
    write_reports(root, &report)?;
    Ok(DiscoveryOutcome { library, report })
}

/// Minimal model calls for one task with and without skill-RAG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub calls_with: Option<u64>,
    pub calls_without: Option<u64>,
    /// `calls_with / calls_without`; absent when either arm never verified.
    pub ratio: Option<f64>,
}

pub fn ablation_ratio(with: Option<u64>, without: Option<u64>) -> Option<f64> {
    match (with, without) {
        (Some(w), Some(wo)) if wo > 0 => Some(w as f64 / wo as f64),
        _ => None,
    }
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let show = |c: Option<u64>| c.map_or_else(|| "-".to_string(), |v| v.to_string());
    let width = rows.iter().map(|r| r.task.chars().count()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>6}  {:>9}  {:>6}\n", "task", "w/ RAG", "w/o RAG", "ratio");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>9}  {:>6}\n",
            r.task,
            show(r.calls_with),
            show(r.calls_without),
            fmt_ratio(r.ratio)
        ));
    }
    out
}

/// Learns `tasks` in order twice, once with and once without skill-RAG,
/// each arm with its own library and stopping every task at its first
/// verified option. Calls are counted from the gateway counter.
pub fn rag_ablation(
    env: &TabletopEnv,
    gateway: &Gateway,
    tasks: &[String],
    config: &LearningRunConfig,
    seed: u64,
) -> Result<Vec<AblationRow>, OrchestratorError> {
    let arm = |rag: bool| -> Result<Vec<Option<u64>>, OrchestratorError> {
        let cfg = LearningRunConfig { rag, stop_on_first: true, ..config.clone() };
        let mut library = SkillLibrary::new();
        let mut calls = Vec::new();
        for (i, task) in tasks.iter().enumerate() {
            let run_id = format!("ablation-{}-{:02}", if rag { "rag" } else { "norag" }, i + 1);
            let ctx = LearnContext { env, gateway, library: &library, run_id: &run_id, seed: mix_seed(seed, i as u64) };
            match learn_skill(&ctx, task, &cfg, LearnStart::default()) {
                Ok(outcome) => {
                    calls.push(outcome.report.calls_to_first_option);
                    outcome.commit(&mut library)?;
                }
                Err(LearnError::Gateway(e)) => return Err(e.into()),
                Err(_) => calls.push(None),
            }
        }
        Ok(calls)
    };
    let with = arm(true)?;
    let without = arm(false)?;
    Ok(tasks
        .iter()
        .zip(with.into_iter().zip(without))
        .map(|(task, (w, wo))| AblationRow { task: task.clone(), calls_with: w, calls_without: wo, ratio: ablation_ratio(w, wo) })
        .collect())
}
