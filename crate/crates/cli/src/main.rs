use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asd_agent::assessor::{summarize_keyframes, AssessError, AssessMode};
use asd_agent::evolution::{learn_skill, LearnContext, LearnError, LearnStart, RunReport};
use asd_agent::fsutil::write_atomic;
use asd_agent::gateway::{
    Backend, Gateway, GatewayError, LiveBackend, LiveConfig, RecordingBackend, Script, ScriptedBackend,
};
use asd_agent::library::{slug, LibraryError, SkillLibrary};
use asd_agent::orchestrator::{
    compute_metrics, discovery_loop, rag_ablation, render_ablation, render_table, DiscoveryConfig, DiscoveryReport,
    OrchestratorError, RawRecord, REPORT_JSON_FILE, RUNS_DIR,
};
use asd_agent::quest::{decompose, execute_chain, Quest, QuestContext, QuestError, QuestOrigin};
use asd_core::dsl::{CheckedFn, FunctionSource};
use asd_core::sim::EnvConfig;
use asd_core::trainer::{eval_episode_seed, rollout};
use asd_core::TabletopEnv;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "asd", version, about = "Autonomous skill learning for a simulated tabletop robot")]
struct Cli {
    /// TOML file with `[env]` and `[discovery]` tables (all keys optional).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = BackendArg::Scripted)]
    backend: BackendArg,
    /// Fixture directory read by the scripted backend and written by the recording one.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Answer script for the recording backend.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Skill library directory.
    #[arg(long, global = true, default_value = "library")]
    library: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    assessor: Option<AssessorArg>,
    /// Leave previously verified functions out of generation prompts.
    #[arg(long, global = true)]
    no_rag: bool,
    /// Append every model exchange to this JSON-lines file.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Scripted,
    Recording,
    Live,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssessorArg {
    Oracle,
    Vlm,
}

#[derive(Subcommand)]
enum Command {
    /// Propose, learn and collect tasks until the proposal budget is spent.
    Discover {
        #[arg(long)]
        max_proposals: Option<usize>,
    },
    /// Learn a single task and add verified options to the library.
    Learn { task: String },
    /// Decompose a long task and run it, learning missing steps on demand.
    Quest { instruction: String },
    /// Print the metrics table of the last discovery run.
    Report,
    /// Roll out a stored skill and print its trajectory.
    Replay {
        skill: String,
        #[arg(long)]
        option: Option<usize>,
        /// Reset seed of the replayed episode.
        #[arg(long, default_value_t = 0)]
        episode: u64,
    },
    /// Count minimal model calls per task with and without skill-RAG.
    AblateRag {
        #[arg(required = true)]
        tasks: Vec<String>,
    },
    /// Print the observation schema given to the model.
    Schema,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AppConfig {
    env: EnvConfig,
    discovery: DiscoveryConfig,
}

/// Failure classes, each with its own exit status.
enum CliError {
    Config(String),
    Gateway(String),
    Invariant(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Gateway(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Gateway(m) | CliError::Invariant(m) | CliError::Other(m) => m,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) | GatewayError::Render { .. } => CliError::Config(e.to_string()),
            _ => CliError::Gateway(e.to_string()),
        }
    }
}

impl From<LibraryError> for CliError {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::PurityViolation { .. } => CliError::Invariant(e.to_string()),
            LibraryError::Io { .. } => CliError::Other(e.to_string()),
            LibraryError::Schema { .. } | LibraryError::Version { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Gateway(g) => g.into(),
            LearnError::Assess(AssessError::Gateway(g)) => g.into(),
            LearnError::SuccessFnUnobtainable { .. } => CliError::Other(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<QuestError> for CliError {
    fn from(e: QuestError) -> Self {
        match e {
            QuestError::Gateway(g) => g.into(),
            QuestError::Learn(l) => l.into(),
            QuestError::Library(l) => l.into(),
            QuestError::EmptyInstruction => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Gateway(g) => g.into(),
            OrchestratorError::Library(l) => l.into(),
            OrchestratorError::Config(_) | OrchestratorError::Checkpoint { .. } => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.discovery.seed = seed;
    }
    if let Some(a) = cli.assessor {
        config.discovery.learning.assess_mode = match a {
            AssessorArg::Oracle => AssessMode::Oracle,
            AssessorArg::Vlm => AssessMode::Vlm,
        };
    }
    if cli.no_rag {
        config.discovery.learning.rag = false;
    }
    config.discovery.learning.validate().map_err(CliError::Config)?;
    Ok(config)
}

fn build_gateway(cli: &Cli) -> Result<Gateway, CliError> {
    let fixtures = || cli.fixtures.as_deref().ok_or_else(|| CliError::Config("--fixtures is required for this backend".into()));
    let backend: Box<dyn Backend> = match cli.backend {
        BackendArg::Scripted => Box::new(ScriptedBackend::load(fixtures()?)?),
        BackendArg::Recording => {
            let script = cli.script.as_deref().ok_or_else(|| CliError::Config("--script is required for recording".into()))?;
            Box::new(RecordingBackend::new(Script::load(script)?, fixtures()?)?)
        }
        BackendArg::Live => Box::new(LiveBackend::new(LiveConfig::from_env()?)),
    };
    let gateway = Gateway::new(backend);
    match &cli.transcript {
        Some(path) => Ok(gateway.with_transcript(path)?),
        None => Ok(gateway),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Other(format!("{}: {e}", parent.display())))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialise");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn ensure_pure(library: &SkillLibrary) -> Result<(), CliError> {
    let impure = library.purity_scan();
    if impure.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!("library_purity_violation: options with negative verdicts: {impure:?}")))
    }
}

fn fmt_rate(c: &asd_agent::evolution::CandidateRecord) -> String {
    match &c.stats.error {
        Some(_) => "error".to_string(),
        None => format!("{:.2}", c.stats.eval_success_rate),
    }
}

fn print_run(report: &RunReport) {
    println!("task: {}", report.task);
    let s = report.success_samples;
    println!("success functions: {} sample(s), {} rejected before training", s.total, s.invalid);
    for l in &report.lineages {
        println!("lineage {}: success `{}`", l.success_index + 1, l.success.text.trim());
        if l.satisfied_at_start {
            println!("  note: the start state already satisfies this success function");
        }
        for g in &l.generations {
            let rates: Vec<String> = g.candidates.iter().map(fmt_rate).collect();
            let survivor = g.survivor.map_or("-".to_string(), |i| (i + 1).to_string());
            let verdict = g
                .survivor
                .and_then(|i| g.candidates[i].slow_verdict.as_ref())
                .map_or("not assessed".to_string(), |v| format!("{} ({})", if v.success { "verified" } else { "rejected" }, v.rationale));
            println!("  generation {}: rates [{}], survivor {survivor}, {verdict}", g.generation + 1, rates.join(", "));
        }
    }
    println!("verified options: {}", report.options);
    println!("archived candidates: {}", report.candidates);
    println!("model calls: {}", report.calls);
    if let Some(c) = report.survivors().find(|c| c.slow_verdict.as_ref().is_some_and(|v| v.success)) {
        if let Some(b) = &c.behavior {
            println!("behavior of the first verified option (eval success rate {:.2}):", c.stats.eval_success_rate);
            for line in b.render().lines() {
                println!("  {line}");
            }
        }
    }
    print!("{}", render_table(&[compute_metrics(&RawRecord::from_report(report))]));
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let env = TabletopEnv::new(config.env.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let root = cli.library.as_path();
    let seed = config.discovery.seed;
    let learning = &config.discovery.learning;
    match &cli.command {
        Command::Schema => {
            println!("{}", env.schema().text());
        }
        Command::Report => {
            let path = root.join(REPORT_JSON_FILE);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("{}: {e} (run `discover` first)", path.display())))?;
            let report: DiscoveryReport =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            print!("{}", report.render());
        }
        Command::Discover { max_proposals } => {
            let gateway = build_gateway(cli)?;
            let mut dc = config.discovery.clone();
            if let Some(m) = max_proposals {
                dc.max_proposals = *m;
            }
            let out = discovery_loop(&env, &gateway, root, &dc)?;
            print!("{}", out.report.render());
            ensure_pure(&out.library)?;
        }
        Command::Learn { task } => {
            let gateway = build_gateway(cli)?;
            let mut library = SkillLibrary::load_or_empty(root)?;
            let run_id = format!("learn-{}", slug(task));
            let ctx = LearnContext { env: &env, gateway: &gateway, library: &library, run_id: &run_id, seed };
            let outcome = learn_skill(&ctx, task, learning, LearnStart::default())?;
            outcome.commit(&mut library)?;
            library.save(root)?;
            write_json(&root.join(RUNS_DIR).join(format!("{run_id}.json")), &outcome.report)?;
            print_run(&outcome.report);
            if let Some(f) = &outcome.failure {
                println!("failed: {}", f.reason);
            }
            ensure_pure(&library)?;
        }
        Command::Quest { instruction } => {
            let gateway = build_gateway(cli)?;
            let mut library = SkillLibrary::load_or_empty(root)?;
            let quest = Quest::new(instruction, QuestOrigin::Human)?;
            let plan = decompose(&gateway, &env, &quest, &library, learning)?;
            let run_id = format!("quest-{}", slug(instruction));
            let ctx = QuestContext { env: &env, gateway: &gateway, run_id: &run_id, seed };
            let report = execute_chain(&ctx, &plan, &mut library, learning)?;
            library.save(root)?;
            write_json(&root.join(RUNS_DIR).join(format!("{run_id}.json")), &report)?;
            println!("{}", report.render());
            for s in &report.steps {
                if let Some(holds) = s.reset_chaining_holds {
                    println!(
                        "step {}: every training episode started from the chained state: {}",
                        s.index + 1,
                        if holds { "yes" } else { "no" }
                    );
                }
            }
            ensure_pure(&library)?;
        }
        Command::Replay { skill, option, episode } => {
            let library = SkillLibrary::load(root)?;
            let s = library.skill(skill).ok_or_else(|| CliError::Config(format!("no skill named '{skill}'")))?;
            let idx = match option {
                Some(i) if *i < s.options.len() => *i,
                Some(i) => return Err(CliError::Config(format!("skill '{}' has no option {i}", s.name))),
                None => s.best_option().expect("stored skills have options"),
            };
            let o = &s.options[idx];
            let check = |src: &FunctionSource| {
                CheckedFn::new(src.clone(), env.schema()).map_err(|d| CliError::Config(format!("stored function: {d}")))
            };
            let (reward, success) = (check(&o.reward)?, check(&o.success)?);
            let start = env.sample_reset(eval_episode_seed(seed, *episode as usize));
            let traj = rollout(&env, &o.policy, std::slice::from_ref(&start), &reward, &success, env.horizon())
                .map_err(|d| CliError::Other(d.to_string()))?
                .remove(0);
            println!("skill '{}', option {idx}: {} steps, success {}", s.name, traj.len(), traj.succeeded());
            for (t, st) in traj.steps.iter().enumerate() {
                let p = st.state.ee_pos;
                println!(
                    "{t:4}  ee ({:.3}, {:.3}, {:.3})  aperture {:.2}  reward {:.4}",
                    p.x, p.y, p.z, st.state.gripper_aperture, st.reward
                );
            }
            let b = summarize_keyframes(&env, &s.description, &traj, learning.keyframes);
            println!("{}", b.render());
        }
        Command::AblateRag { tasks } => {
            let gateway = build_gateway(cli)?;
            let rows = rag_ablation(&env, &gateway, tasks, learning, seed)?;
            write_json(&root.join("ablation.json"), &rows)?;
            print!("{}", render_ablation(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
