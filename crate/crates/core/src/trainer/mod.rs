//! Cross-entropy-method policy search over the weights of a small MLP.
//!
//! Every population member is scored by the return of its own episode(s);
//! elites are carried over with their stored fitness, so the best member's
//! return never decreases. Episodes stop at the first successful state.

mod features;
mod policy;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use features::FeatureMap;
pub use policy::{init_policy, param_count, PolicyError, PolicyParams, ACT_DIM, HIDDEN};

use crate::dsl::{CheckedFn, Diagnostic, FnKind};
use crate::num::{mix_seed, Scalar};
use crate::sim::{EnvError, FieldKind, ObservationSchema, SceneState, TabletopEnv, Trajectory, Transition};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const EVAL_STREAM: u64 = 0x6576_616c_0000_0002;
const SAMPLE_STREAM: u64 = 0x7361_6d70_0000_0003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// CEM iterations; `None` runs as many as the episode budget allows.
    pub iterations: Option<usize>,
    pub population: usize,
    pub elite_fraction: f64,
    /// Environments stepped per iteration; each member gets
    /// `envs_per_rollout / population` (at least one) episodes.
    pub envs_per_rollout: usize,
    pub horizon: usize,
    pub episode_budget: usize,
    pub eval_episodes: usize,
    /// Initial sampling spread around a fresh policy.
    pub init_std: f64,
    /// Initial sampling spread around a warm-start policy.
    pub warm_start_std: f64,
    /// Spread added back after every refit so the search never collapses.
    pub min_std: f64,
    /// Factor applied to the refit spread each iteration.
    pub spread_decay: f64,
    /// Distinct start states per iteration; members are ranked against the
    /// others that started from the same state.
    pub reset_groups: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: None,
            population: 64,
            elite_fraction: 0.1,
            envs_per_rollout: 64,
            horizon: 250,
            episode_budget: 2000,
            eval_episodes: 100,
            init_std: 1.0,
            warm_start_std: 1.0,
            min_std: 0.02,
            spread_decay: 0.95,
            reset_groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl TrainConfig {
    pub fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).clamp(1, self.population)
    }

    pub fn episodes_per_member(&self) -> usize {
        (self.envs_per_rollout / self.population.max(1)).max(1)
    }

    /// Number of CEM iterations that fit in the budget after evaluation.
    pub fn planned_iterations(&self) -> usize {
        let per = self.episodes_per_member();
        let first = self.population * per;
        let later = (self.population - self.elite_count()) * per;
        let avail = self.episode_budget.saturating_sub(self.eval_episodes);
        let fit = match (avail < first, later) {
            (true, _) => 0,
            // carried elites fill the population: later iterations would
            // sample nothing new
            (false, 0) => 1,
            (false, _) => 1 + (avail - first) / later,
        };
        match self.iterations {
            Some(n) => n.min(fit),
            None => fit,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.population == 0 {
            return bad("population must be at least 1");
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return bad("elite fraction must lie in (0, 1]");
        }
        if self.reset_groups == 0 {
            return bad("reset groups must be at least 1");
        }
        if !(self.spread_decay > 0.0 && self.spread_decay <= 1.0) {
            return bad("spread decay must lie in (0, 1]");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.eval_episodes == 0 {
            return bad("eval episodes must be at least 1");
        }
        if self.eval_episodes > self.episode_budget {
            return bad("eval episodes exceed the episode budget");
        }
        for (name, v) in [("init_std", self.init_std), ("warm_start_std", self.warm_start_std), ("min_std", self.min_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainStats {
    pub eval_success_rate: f64,
    /// Whether any training or evaluation step was judged successful.
    pub success_positive: bool,
    /// Mean return of the members scored in each iteration.
    pub mean_return_curve: Vec<f64>,
    /// Best stored fitness after each iteration (elites included).
    pub best_return_curve: Vec<f64>,
    /// Fraction of each iteration's training episodes that succeeded.
    pub success_rate_curve: Vec<f64>,
    pub iterations: usize,
    pub episodes_used: usize,
    /// Evaluation error that ended training early.
    pub error: Option<Diagnostic>,
    /// First non-finite success evaluation (such steps count as unsuccessful).
    pub success_diagnostic: Option<Diagnostic>,
    /// Number of distinct initial states across training episodes.
    pub distinct_initial_states: usize,
    pub first_initial_state: Option<SceneState<f64>>,
}

/// Summary of one episode without the per-step record.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome<S> {
    pub total_return: f64,
    pub success: bool,
    pub length: usize,
    pub initial_state: SceneState<S>,
    pub terminal_state: SceneState<S>,
    pub success_diagnostic: Option<Diagnostic>,
}

/// Reusable buffers for stepping one policy.
struct Scratch<S> {
    obs: Vec<S>,
    prev: Vec<S>,
    norm: Vec<S>,
    hidden: Vec<S>,
}

impl<S: Scalar> Scratch<S> {
    fn new() -> Self {
        Self { obs: Vec::new(), prev: Vec::new(), norm: Vec::new(), hidden: Vec::new() }
    }
}

/// Runs one episode. With `noise_seed` the policy samples actions around its
/// mean; otherwise it acts greedily. `record` collects every transition.
#[allow(clippy::too_many_arguments)]
fn run_episode<S: Scalar>(
    env: &TabletopEnv<S>,
    policy: &PolicyParams<S>,
    reward: Option<&CheckedFn>,
    success: &CheckedFn,
    horizon: usize,
    start: SceneState<S>,
    noise_seed: Option<u64>,
    scratch: &mut Scratch<S>,
    mut record: Option<&mut Vec<Transition<S>>>,
) -> Result<EpisodeOutcome<S>, Diagnostic> {
    let schema = env.schema();
    let features = FeatureMap::new(schema, &policy.observed);
    let clamp = S::lit(env.config().step_clamp);
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let mut state = start.clone();
    env.observe_into(&state, &mut scratch.prev);
    let mut total = 0.0;
    let mut raw = [S::zero(); ACT_DIM];
    let mut success_diagnostic = None;
    for t in 0..horizon {
        env.observe_into(&state, &mut scratch.obs);
        let ok = match success.eval_success(&scratch.obs) {
            Ok(v) => v,
            Err(d) => {
                success_diagnostic.get_or_insert(d);
                false
            }
        };
        let r = match reward {
            Some(f) => f.eval_reward(&scratch.obs, &scratch.prev)?,
            None => S::zero(),
        };
        total += r.as_f64();
        features.compute(&scratch.obs, &mut scratch.norm);
        policy.forward(&scratch.norm, &mut scratch.hidden, &mut raw);
        let action = match rng.as_mut() {
            Some(rng) => {
                let mut eps = [S::zero(); ACT_DIM];
                for e in eps.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *e = S::lit(z);
                }
                policy.command(&raw, Some(&eps), clamp)
            }
            None => policy.command(&raw, None, clamp),
        };
        if let Some(rec) = record.as_mut() {
            rec.push(Transition { state: state.clone(), action, reward: r, success: ok });
        }
        if ok {
            return Ok(EpisodeOutcome {
                total_return: total,
                success: true,
                length: t + 1,
                initial_state: start,
                terminal_state: state,
                success_diagnostic,
            });
        }
        std::mem::swap(&mut scratch.prev, &mut scratch.obs);
        state = env.step_one(&state, &action).0;
    }
    Ok(EpisodeOutcome {
        total_return: total,
        success: false,
        length: horizon,
        initial_state: start,
        terminal_state: state,
        success_diagnostic,
    })
}

/// Greedy rollouts of `policy` from the given start states, recording full
/// trajectories. A non-finite reward aborts with the diagnostic.
pub fn rollout<S: Scalar>(
    env: &TabletopEnv<S>,
    policy: &PolicyParams<S>,
    starts: &[SceneState<S>],
    reward: &CheckedFn,
    success: &CheckedFn,
    horizon: usize,
) -> Result<Vec<Trajectory<S>>, Diagnostic> {
    let mut scratch = Scratch::new();
    starts
        .iter()
        .map(|s| {
            let mut steps = Vec::new();
            let out = run_episode(env, policy, Some(reward), success, horizon, s.clone(), None, &mut scratch, Some(&mut steps))?;
            Ok(Trajectory { steps, terminal_state: out.terminal_state, terminated_early: out.success })
        })
        .collect()
}

/// Start state of an episode: the override if present, else a fresh reset.
fn start_state<S: Scalar>(env: &TabletopEnv<S>, seed: u64, override_state: Option<&SceneState<S>>) -> SceneState<S> {
    match override_state {
        Some(s) => s.clone(),
        None => env.sample_reset(seed),
    }
}

/// Seed of evaluation episode `i`; drawn from a stream training never uses.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(mix_seed(seed, EVAL_STREAM), i as u64)
}

fn train_episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(mix_seed(seed, TRAIN_STREAM), i as u64)
}

/// Greedy success rate over `episodes` fresh evaluation episodes.
pub fn evaluate<S: Scalar>(
    env: &TabletopEnv<S>,
    policy: &PolicyParams<S>,
    success: &CheckedFn,
    episodes: usize,
    seed: u64,
    reset_override: Option<&SceneState<S>>,
) -> f64 {
    evaluate_detailed(env, policy, success, episodes, seed, reset_override).0
}

fn evaluate_detailed<S: Scalar>(
    env: &TabletopEnv<S>,
    policy: &PolicyParams<S>,
    success: &CheckedFn,
    episodes: usize,
    seed: u64,
    reset_override: Option<&SceneState<S>>,
) -> (f64, Option<Diagnostic>) {
    let mut scratch = Scratch::new();
    let mut wins = 0usize;
    let mut diag = None;
    for i in 0..episodes {
        let start = start_state(env, eval_episode_seed(seed, i), reset_override);
        let out = run_episode(env, policy, None, success, env.horizon(), start, None, &mut scratch, None)
            .expect("reward-free episodes cannot fail");
        if diag.is_none() {
            diag = out.success_diagnostic;
        }
        wins += usize::from(out.success);
    }
    (wins as f64 / episodes.max(1) as f64, diag)
}

/// Everything one training run needs besides the functions themselves.
#[derive(Debug, Clone, Copy)]
pub struct TrainRequest<'a, S> {
    pub warm_start: Option<&'a PolicyParams<S>>,
    pub reset_override: Option<&'a SceneState<S>>,
    pub seed: u64,
}

impl<S> Default for TrainRequest<'_, S> {
    fn default() -> Self {
        Self { warm_start: None, reset_override: None, seed: 0 }
    }
}

/// Fields a trained policy observes: the 3-vector fields the task's
/// functions mention, plus whatever a warm-start parent already observed.
pub fn observed_fields<S>(
    schema: &ObservationSchema,
    reward: &CheckedFn,
    success: &CheckedFn,
    warm_start: Option<&PolicyParams<S>>,
) -> Vec<String> {
    let mut names: BTreeSet<String> = warm_start.map(|w| w.observed.iter().cloned().collect()).unwrap_or_default();
    for name in reward.fields().into_iter().chain(success.fields()) {
        if schema.field(&name).is_some_and(|f| f.kind == FieldKind::Vec3) {
            names.insert(name);
        }
    }
    names.into_iter().collect()
}

struct Member<S> {
    theta: Vec<S>,
    fitness: f64,
}

/// Learns a policy maximising the return of `reward`, stopping episodes at
/// the first state `success` accepts.
///
/// Each iteration draws `reset_groups` start states shared by the members
/// assigned to them round-robin, and ranks members by their return minus
/// their group's mean return, so an easy start cannot make a poor member
/// look good. The sampling distribution is refit to the top members of the
/// current iteration; the best members ever seen are carried along with
/// their stored returns. Training rollouts act greedily (exploration happens
/// in weight space), and the log standard deviations are not searched. The
/// policy observes only the object offsets named by the task's functions
/// (see [`observed_fields`]).
///
/// The returned policy is the final sampling mean. Its greedy success rate
/// is measured on fresh evaluation episodes that count toward the budget.
pub fn train<S: Scalar>(
    env: &TabletopEnv<S>,
    config: &TrainConfig,
    reward: &CheckedFn,
    success: &CheckedFn,
    req: TrainRequest<'_, S>,
) -> Result<(PolicyParams<S>, TrainStats), TrainError> {
    config.validate()?;
    if reward.kind() != FnKind::Reward || success.kind() != FnKind::Success {
        return Err(TrainError::Config("reward/success functions passed in the wrong slots".into()));
    }
    if let Some(s) = req.reset_override {
        env.validate(s)?;
    }
    let schema = env.schema();
    let mut base = init_policy(FeatureMap::input_dim_for(schema), ACT_DIM, req.seed, req.warm_start)?;
    base.observed = observed_fields(schema, reward, success, req.warm_start);
    let dim = base.param_count();
    let searched = dim - ACT_DIM;
    let n_elite = config.elite_count();
    let per_member = config.episodes_per_member();
    let groups = config.reset_groups;
    let iterations = config.planned_iterations();

    let mut stats = TrainStats::default();
    let mut mean = base.to_flat();
    let spread = if req.warm_start.is_some() { config.warm_start_std } else { config.init_std };
    let mut std: Vec<S> = (0..dim).map(|j| if j < searched { S::lit(spread) } else { S::zero() }).collect();
    let min_var = S::lit(config.min_std * config.min_std);
    let shrink = S::lit(config.spread_decay * config.spread_decay);
    let mut elites: Vec<Member<S>> = Vec::new();
    let mut sampler = ChaCha8Rng::seed_from_u64(mix_seed(req.seed, SAMPLE_STREAM));
    let mut scratch = Scratch::new();
    let mut candidate = base.clone();
    let mut starts: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut episode = 0usize;

    'search: for it in 0..iterations {
        let group_starts: Vec<Vec<SceneState<S>>> = (0..groups)
            .map(|g| {
                (0..per_member)
                    .map(|k| {
                        let seed = train_episode_seed(req.seed, (it * groups + g) * per_member + k);
                        start_state(env, seed, req.reset_override)
                    })
                    .collect()
            })
            .collect();
        let fresh = if it == 0 { config.population } else { config.population - elites.len() };
        let mut scored = Vec::with_capacity(fresh);
        let mut wins = 0usize;
        for m in 0..fresh {
            let theta: Vec<S> = if it == 0 && m == 0 {
                // the starting point itself is always a member
                mean.clone()
            } else {
                mean.iter()
                    .zip(&std)
                    .map(|(mu, sd)| {
                        let z: f64 = StandardNormal.sample(&mut sampler);
                        *mu + *sd * S::lit(z)
                    })
                    .collect()
            };
            candidate.set_flat(&theta)?;
            let mut ret = 0.0;
            for start in &group_starts[m % groups] {
                episode += 1;
                if stats.first_initial_state.is_none() {
                    stats.first_initial_state = Some(start.cast());
                }
                starts.insert(start.fingerprint());
                match run_episode(env, &candidate, Some(reward), success, config.horizon, start.clone(), None, &mut scratch, None) {
                    Ok(out) => {
                        ret += out.total_return;
                        wins += usize::from(out.success);
                        if stats.success_diagnostic.is_none() {
                            stats.success_diagnostic = out.success_diagnostic;
                        }
                    }
                    Err(d) => {
                        stats.error = Some(d);
                        break 'search;
                    }
                }
            }
            scored.push(Member { theta, fitness: ret / per_member as f64 });
        }
        let n = scored.len() as f64;
        stats.mean_return_curve.push(scored.iter().map(|m| m.fitness).sum::<f64>() / n);
        stats.success_rate_curve.push(wins as f64 / (n * per_member as f64));
        stats.success_positive |= wins > 0;

        // rank by advantage over the members that shared the same starts
        let mut group_sum = vec![0.0; groups];
        let mut group_len = vec![0usize; groups];
        for (m, member) in scored.iter().enumerate() {
            group_sum[m % groups] += member.fitness;
            group_len[m % groups] += 1;
        }
        let mut ranked: Vec<(f64, usize)> = scored
            .iter()
            .enumerate()
            .map(|(m, member)| (member.fitness - group_sum[m % groups] / group_len[m % groups] as f64, m))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: Vec<&[S]> = ranked.iter().take(n_elite).map(|&(_, m)| scored[m].theta.as_slice()).collect();
        let k = S::lit(top.len() as f64);
        for j in 0..searched {
            let mu = top.iter().map(|t| t[j]).sum::<S>() / k;
            let var = top.iter().map(|t| (t[j] - mu) * (t[j] - mu)).sum::<S>() / k;
            mean[j] = mu;
            std[j] = (var * shrink + min_var).sqrt();
        }

        // carried elites come first so they win ties against newcomers
        let mut pool = std::mem::take(&mut elites);
        pool.extend(scored);
        pool.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
        pool.truncate(n_elite);
        elites = pool;
        stats.best_return_curve.push(elites[0].fitness);
        stats.iterations = it + 1;
    }
    stats.episodes_used = episode;
    stats.distinct_initial_states = starts.len();

    let mut policy = base;
    if stats.iterations > 0 {
        policy.set_flat(&mean)?;
    }
    if !policy.is_finite() {
        return Err(TrainError::Policy(PolicyError::NonFinite));
    }
    if stats.error.is_none() {
        let (rate, diag) =
            evaluate_detailed(env, &policy, success, config.eval_episodes, req.seed, req.reset_override);
        stats.eval_success_rate = rate;
        stats.episodes_used += config.eval_episodes;
        stats.success_positive |= rate > 0.0;
        if stats.success_diagnostic.is_none() {
            stats.success_diagnostic = diag;
        }
    }
    Ok((policy, stats))
}
