//! Seeded experiment execution with exact regret accounting, revisit
//! counting, deterministic bound evaluation, and invariant monitoring.
//!
//! Regret is never estimated from rollouts: after every path the greedy
//! policy is frozen into a table and evaluated exactly against the true MDP
//! by backward induction, so each per-path term
//! `V⋆_1(s_1) − V^{π_k}_1(s_1)` is noise-free and lies in `[0, H]` up to
//! rounding. Episode regret accumulates the same quantity for the policy
//! recorded when an episode's final backward pass completes, which makes the
//! episode and path senses agree exactly on completion paths.
//!
//! After a run of the revisiting agent the harness evaluates the
//! deterministic consequences of the update rule — the revisit count
//! `K − N ≤ 4c_β²d²H⁵ln²(KH/δ)/Δ²`, its per-step form with `H⁴`, the
//! elliptical-potential re-check `Σ φᵀΛ⁻¹φ ≤ 2d·ln(|I_h|/d + 1)`, and
//! index-set structure — plus the statistical envelopes: the average-regret
//! bound `8c_β·sqrt(d²H⁷ln²(HT/δ)/T)` with its sample-size precondition, the
//! path-regret bound, and the gap-driven expected-regret envelope
//! `17c_β²d²H⁷ln²(KH)/Δ²`.
//!
//! Wall-clock time is deliberately excluded from the serialized summary so
//! that identical `(environment, config)` pairs reproduce byte-identical
//! artifacts; runtimes go to standard output where the CLI wants them.

use std::io::{self, Write};

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{compute_beta, AgentError, BaselineAgent, LinQAgent, PathBuffer};
use crate::envgen::{next_index, EnvMeta, Environment};
use crate::mdp::{policy_evaluate, DeterministicPolicy, MdpError};

/// Numeric slack for checks whose exact-arithmetic form is an identity or a
/// deterministic inequality.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-10;
pub const REGRESSION_IDENTITY_TOLERANCE: f64 = 1e-8;
pub const OPTIMISM_SLACK: f64 = 1e-8;
pub const ELLIPTICAL_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {what} — {detail}")]
    Config { what: &'static str, detail: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Which policy learns/acts during a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Revisiting optimistic value iteration.
    Linq,
    /// Full-refit optimistic value iteration, one trajectory per episode.
    BaselineLsvi,
    /// Plays the exact greedy policy of the oracle solution.
    OracleGreedy,
    /// Uniformly random actions; regret from exact stochastic evaluation.
    UniformRandom,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Linq => "linq",
            AgentKind::BaselineLsvi => "baseline_lsvi",
            AgentKind::OracleGreedy => "oracle_greedy",
            AgentKind::UniformRandom => "uniform_random",
        }
    }
}

/// How nature assigns each episode's initial state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStateMode {
    /// Every episode starts at the given state.
    Fixed(usize),
    /// Episode n starts at state (n−1) mod |S|.
    Cycle,
    /// One uniform draw per episode start.
    Random,
}

impl Default for InitialStateMode {
    fn default() -> Self {
        InitialStateMode::Fixed(0)
    }
}

/// Opt-in monitors. The cheap deterministic ones (elliptical potential,
/// index structure, episode/path consistency, revisit bounds) always run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorFlags {
    /// Check 0 ≤ Q − Q⋆ ≤ 2b at every visited triple after every pass.
    pub optimism: bool,
    /// Accumulate the transition-noise martingale and compare to its
    /// concentration bound.
    pub martingale: bool,
    /// Check the relative residual of Λθ = u + Mθ_next after every pass.
    pub regression_identity: bool,
    /// Keep explicit index sets and verify nesting element-wise at the end.
    pub index_sets: bool,
}

impl MonitorFlags {
    pub fn all() -> Self {
        MonitorFlags {
            optimism: true,
            martingale: true,
            regression_identity: true,
            index_sets: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub agent: AgentKind,
    /// N. Zero is allowed and produces an empty log.
    pub episodes: u64,
    pub delta: f64,
    pub c_beta: f64,
    /// Replaces the environment's certified gap in the stop threshold.
    pub gap_override: Option<f64>,
    pub seed: u64,
    pub monitors: MonitorFlags,
    pub initial_state_mode: InitialStateMode,
}

impl ExperimentConfig {
    /// Sensible defaults: δ = 0.1, c_β = 8, fixed initial state 0.
    pub fn new(agent: AgentKind, episodes: u64, seed: u64) -> Self {
        ExperimentConfig {
            agent,
            episodes,
            delta: 0.1,
            c_beta: 8.0,
            gap_override: None,
            seed,
            monitors: MonitorFlags::default(),
            initial_state_mode: InitialStateMode::default(),
        }
    }

    fn validate(&self, env: &Environment) -> Result<(), HarnessError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(HarnessError::Config {
                what: "delta",
                detail: format!("must lie in (0,1), got {}", self.delta),
            });
        }
        if !self.c_beta.is_finite() || self.c_beta < 0.0 {
            return Err(HarnessError::Config {
                what: "c_beta",
                detail: format!("must be finite and non-negative, got {}", self.c_beta),
            });
        }
        if let Some(gap) = self.gap_override {
            if gap.is_nan() || gap <= 0.0 {
                return Err(HarnessError::Config {
                    what: "gap_override",
                    detail: format!("must be positive, got {gap}"),
                });
            }
        }
        if let InitialStateMode::Fixed(s) = self.initial_state_mode {
            if s >= env.mdp().num_states() {
                return Err(HarnessError::Config {
                    what: "initial_state",
                    detail: format!(
                        "state {s} out of range for |S| = {}",
                        env.mdp().num_states()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// One CSV row of the per-path time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_index: u64,
    /// 1-based episode the path belongs to.
    pub episode_index: u64,
    pub start_step: usize,
    pub per_path_regret: f64,
    pub cum_path_regret: f64,
    /// Cumulative regret over *completed* episodes as of this path.
    pub cum_episode_regret: f64,
    pub revisits_so_far: u64,
    pub samples_so_far: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorVerdict {
    pub pass: bool,
    /// Worst observed margin or statistic, check-specific.
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimismVerdict {
    pub pass: bool,
    /// Most negative Q − Q⋆ seen (should stay ≥ −slack).
    pub worst_low: f64,
    /// Largest Q − Q⋆ − 2b seen (should stay ≤ slack).
    pub worst_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleVerdict {
    pub pass: bool,
    /// |ξ₂| accumulated over all updates.
    pub statistic: f64,
    /// H·sqrt(H·K·ln(2/δ)).
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    /// Σ pre-update quadratic forms vs 2d·ln(|I_h|/d + 1), per step.
    pub elliptical: MonitorVerdict,
    /// Counts non-decreasing in h, suffix updates, terminal count facts,
    /// plus element-wise set nesting when tracking was enabled.
    pub index_structure: MonitorVerdict,
    /// Σ episode regret vs Σ completion-path regret.
    pub episode_path_consistency: MonitorVerdict,
    pub regression_identity: Option<MonitorVerdict>,
    pub optimism: Option<OptimismVerdict>,
    pub martingale: Option<MartingaleVerdict>,
}

impl MonitorReport {
    /// Conjunction of the monitors whose exact-arithmetic form is
    /// deterministic; statistical monitors are excluded.
    pub fn deterministic_pass(&self) -> bool {
        self.elliptical.pass
            && self.index_structure.pass
            && self.episode_path_consistency.pass
            && self.regression_identity.as_ref().map_or(true, |v| v.pass)
    }
}

/// Measured quantities vs the analytical bounds they must respect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// False for degenerate runs (no samples).
    pub applicable: bool,
    /// N ≥ 4c_β²d²H⁵ln²(HT/δ)/Δ².
    pub precondition_pass: bool,
    pub precondition_rhs: f64,
    /// 8c_β·sqrt(d²H⁷ln²(HT/δ)/T).
    pub average_regret_bound: f64,
    pub average_regret_measured: f64,
    pub average_regret_pass: bool,
    /// 4c_β²d²H⁵ln²(KH/δ)/Δ².
    pub revisit_bound: f64,
    pub revisits_measured: u64,
    pub revisit_pass: bool,
    /// 4c_β²d²H⁴ln²(KH/δ)/Δ².
    pub per_step_revisit_bound: f64,
    pub per_step_revisit_measured: u64,
    pub per_step_revisit_pass: bool,
    /// 4c_β·sqrt(d²H⁶K·ln²(HT/δ)) + 4c_β²d²H⁶ln²(KH/δ)/Δ².
    pub path_regret_bound: f64,
    pub path_regret_measured: f64,
    pub path_regret_pass: bool,
    /// 17c_β²d²H⁷ln²(KH)/Δ² — a loose envelope on expected regret.
    pub expected_regret_envelope: f64,
    pub expected_envelope_pass: bool,
}

/// Complete record of one run. The per-path series feeds the CSV writer and
/// is excluded from the JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretLog {
    pub agent: AgentKind,
    pub env: EnvMeta,
    /// Episodes completed (N).
    pub episodes: u64,
    /// Paths sampled (K).
    pub paths: u64,
    /// K − N.
    pub revisits: u64,
    /// Total transition samples T = Σ (H − start_step + 1).
    pub samples: u64,
    pub delta: f64,
    pub c_beta: f64,
    pub beta: f64,
    pub k_budget: u64,
    pub seed: u64,
    pub initial_state_mode: InitialStateMode,
    /// Gap fed to the stop threshold; `null` encodes +∞.
    pub gap_input: Option<f64>,
    /// Set when an override exceeded the certified gap (optimism guarantee
    /// voided).
    pub gap_override_exceeds_certified: bool,
    pub cumulative_path_regret: f64,
    pub cumulative_episode_regret: f64,
    pub average_episode_regret: f64,
    /// |I_h| per step (learning agents only).
    pub index_counts: Vec<u64>,
    pub monitors: MonitorReport,
    /// Present for the revisiting agent only.
    pub bounds: Option<BoundReport>,
    #[serde(skip)]
    pub series: Vec<PathRecord>,
}

impl RegretLog {
    /// Deterministic-monitor conjunction, including the revisit bounds.
    pub fn deterministic_pass(&self) -> bool {
        let bounds_ok = self
            .bounds
            .as_ref()
            .map_or(true, |b| !b.applicable || (b.revisit_pass && b.per_step_revisit_pass));
        self.monitors.deterministic_pass() && bounds_ok
    }
}

/// Byte-stable JSON summary (no wall-clock, no per-path series).
pub fn summary_json(log: &RegretLog) -> String {
    let mut out = serde_json::to_string_pretty(log).expect("log serializes");
    out.push('\n');
    out
}

pub fn summary_from_json(text: &str) -> Result<RegretLog, serde_json::Error> {
    serde_json::from_str(text)
}

/// Per-path time series as CSV.
pub fn write_series_csv<W: Write>(log: &RegretLog, mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "path_index,episode_index,start_step,per_path_regret,cum_path_regret,\
         cum_episode_regret,revisits_so_far,samples_so_far"
    )?;
    for r in &log.series {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.path_index,
            r.episode_index,
            r.start_step,
            r.per_path_regret,
            r.cum_path_regret,
            r.cum_episode_regret,
            r.revisits_so_far,
            r.samples_so_far
        )?;
    }
    Ok(())
}

/// Planned path budget: the episode count times one more than the
/// per-episode revisit allowance, with K pre-estimated as N·H inside the
/// logarithm. Evaluated once; β is frozen from it.
pub fn default_k_budget(
    episodes: u64,
    c_beta: f64,
    dim: usize,
    horizon: usize,
    delta: f64,
    gap: f64,
) -> u64 {
    if episodes == 0 {
        return 1;
    }
    let n = episodes as f64;
    let h = horizon as f64;
    let log_arg = (n * h * h / delta).max(1.0 + f64::EPSILON);
    let log2 = log_arg.ln().powi(2);
    let allowance =
        (4.0 * c_beta * c_beta * (dim * dim) as f64 * h.powi(5) * log2 / (gap * gap)).ceil();
    let budget = n * (1.0 + allowance.max(0.0));
    if budget >= u64::MAX as f64 {
        u64::MAX
    } else {
        budget as u64
    }
}

/// V^π for the uniformly random policy, exact backward induction.
/// Returns `(H+1)·S` values, terminal row zero.
fn uniform_policy_values(mdp: &crate::mdp::FiniteMdp) -> Vec<f64> {
    let (hor, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut values = vec![0.0; (hor + 1) * ns];
    for h in (0..hor).rev() {
        for s in 0..ns {
            let mut acc = 0.0;
            for a in 0..na {
                // Same accumulation order as exact backward induction so
                // single-action MDPs reproduce V⋆ bitwise.
                let mut q = mdp.reward_at(h, s, a);
                let row = mdp.transition_row(h, s, a);
                for (next, &p) in row.iter().enumerate() {
                    q += p * values[(h + 1) * ns + next];
                }
                acc += q;
            }
            values[h * ns + s] = acc / na as f64;
        }
    }
    values
}

fn initial_state(
    mode: InitialStateMode,
    episode_index: u64,
    num_states: usize,
    rng: &mut Xoshiro256StarStar,
) -> usize {
    match mode {
        InitialStateMode::Fixed(s) => s,
        InitialStateMode::Cycle => ((episode_index - 1) % num_states as u64) as usize,
        InitialStateMode::Random => next_index(rng, num_states),
    }
}

/// Squared logarithm, the shape every bound below shares.
fn ln2(x: f64) -> f64 {
    let l = x.ln();
    l * l
}

/// Evaluate the analytical bounds against a finished run.
pub fn evaluate_regret_bounds(
    measured: &RunTotals,
    env: &Environment,
    config: &ExperimentConfig,
    gap_input: f64,
    index_counts: &[u64],
) -> BoundReport {
    let d = env.features().dim() as f64;
    let h = env.mdp().horizon() as f64;
    let c = config.c_beta;
    let delta = config.delta;
    let n = measured.episodes as f64;
    let k = measured.paths as f64;
    let t = measured.samples as f64;
    let gap2 = gap_input * gap_input;

    if measured.samples == 0 {
        return BoundReport {
            applicable: false,
            precondition_pass: false,
            precondition_rhs: f64::INFINITY,
            average_regret_bound: f64::INFINITY,
            average_regret_measured: 0.0,
            average_regret_pass: true,
            revisit_bound: 0.0,
            revisits_measured: 0,
            revisit_pass: true,
            per_step_revisit_bound: 0.0,
            per_step_revisit_measured: 0,
            per_step_revisit_pass: true,
            path_regret_bound: 0.0,
            path_regret_measured: 0.0,
            path_regret_pass: true,
            expected_regret_envelope: f64::INFINITY,
            expected_envelope_pass: true,
        };
    }

    let log2_ht = ln2(h * t / delta);
    let log2_kh = ln2(k * h / delta);
    let c2d2 = c * c * d * d;

    let precondition_rhs = 4.0 * c2d2 * h.powi(5) * log2_ht / gap2;
    let precondition_pass = n >= precondition_rhs;
    let average_regret_bound = 8.0 * c * (d * d * h.powi(7) * log2_ht / t).sqrt();
    let average_regret_measured = measured.cumulative_episode_regret / n.max(1.0);
    let revisit_bound = 4.0 * c2d2 * h.powi(5) * log2_kh / gap2;
    let revisits_measured = measured.paths - measured.episodes;
    let per_step_revisit_bound = 4.0 * c2d2 * h.powi(4) * log2_kh / gap2;
    let per_step_revisit_measured = index_counts
        .windows(2)
        .map(|w| w[1] - w[0])
        .max()
        .unwrap_or(0);
    let path_regret_bound = 4.0 * c * (d * d * h.powi(6) * k * log2_ht).sqrt()
        + 4.0 * c2d2 * h.powi(6) * log2_kh / gap2;
    let expected_regret_envelope = 17.0 * c2d2 * h.powi(7) * ln2(k * h) / gap2;

    BoundReport {
        applicable: true,
        precondition_pass,
        precondition_rhs,
        average_regret_bound,
        average_regret_measured,
        average_regret_pass: average_regret_measured <= average_regret_bound,
        revisit_bound,
        revisits_measured,
        revisit_pass: (revisits_measured as f64) <= revisit_bound,
        per_step_revisit_bound,
        per_step_revisit_measured,
        per_step_revisit_pass: (per_step_revisit_measured as f64) <= per_step_revisit_bound,
        path_regret_bound,
        path_regret_measured: measured.cumulative_path_regret,
        path_regret_pass: measured.cumulative_path_regret <= path_regret_bound,
        expected_regret_envelope,
        expected_envelope_pass: measured.cumulative_path_regret <= expected_regret_envelope,
    }
}

/// The totals the bound evaluation consumes.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunTotals {
    pub episodes: u64,
    pub paths: u64,
    pub samples: u64,
    pub cumulative_path_regret: f64,
    pub cumulative_episode_regret: f64,
}

/// Greedy table of whatever the agent currently believes, frozen for exact
/// evaluation.
fn policy_table(
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    mut greedy: impl FnMut(usize, usize) -> usize,
) -> DeterministicPolicy {
    let mut actions = Vec::with_capacity(horizon * num_states);
    for h in 0..horizon {
        for s in 0..num_states {
            actions.push(greedy(h, s));
        }
    }
    DeterministicPolicy::new(horizon, num_states, num_actions, actions)
        .expect("greedy actions are in range")
}

/// Run one experiment to completion. Deterministic given `(env, config)`.
pub fn run_experiment(
    env: &Environment,
    config: &ExperimentConfig,
) -> Result<RegretLog, HarnessError> {
    config.validate(env)?;
    match config.agent {
        AgentKind::Linq => run_linq(env, config),
        AgentKind::BaselineLsvi => run_baseline(env, config),
        AgentKind::OracleGreedy | AgentKind::UniformRandom => run_reference(env, config),
    }
}

/// Execute many independent configs concurrently; output order matches
/// input order and every slot is bitwise identical to a sequential run.
pub fn parallel_sweep(
    env: &Environment,
    configs: &[ExperimentConfig],
) -> Vec<Result<RegretLog, HarnessError>> {
    configs.par_iter().map(|config| run_experiment(env, config)).collect()
}

struct SeriesBuilder {
    records: Vec<PathRecord>,
    totals: RunTotals,
    completion_regret_sum: f64,
}

impl SeriesBuilder {
    fn new() -> Self {
        SeriesBuilder {
            records: Vec::new(),
            totals: RunTotals::default(),
            completion_regret_sum: 0.0,
        }
    }

    fn push_path(
        &mut self,
        path: &PathBuffer,
        horizon: usize,
        episode_index: u64,
        per_path_regret: f64,
        episode_regret: Option<f64>,
    ) {
        self.totals.paths += 1;
        self.totals.samples += (horizon - path.start_step + 1) as u64;
        self.totals.cumulative_path_regret += per_path_regret;
        if let Some(er) = episode_regret {
            self.totals.episodes += 1;
            self.totals.cumulative_episode_regret += er;
            self.completion_regret_sum += per_path_regret;
        }
        let revisits_prev = self.records.last().map_or(0, |r| r.revisits_so_far);
        self.records.push(PathRecord {
            path_index: path.path_index,
            episode_index,
            start_step: path.start_step,
            per_path_regret,
            cum_path_regret: self.totals.cumulative_path_regret,
            cum_episode_regret: self.totals.cumulative_episode_regret,
            revisits_so_far: revisits_prev + u64::from(path.start_step > 1),
            samples_so_far: self.totals.samples,
        });
    }

    /// |Σ episode terms − Σ completion-path terms|.
    fn consistency_gap(&self) -> f64 {
        (self.totals.cumulative_episode_regret - self.completion_regret_sum).abs()
    }
}

fn run_linq(env: &Environment, config: &ExperimentConfig) -> Result<RegretLog, HarnessError> {
    let mdp = env.mdp();
    let dp = env.dp();
    let (hor, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let certified = env.certified_gap();
    let gap_input = config.gap_override.unwrap_or(certified);
    let override_exceeds = config.gap_override.is_some_and(|g| g > certified);
    let k_budget = default_k_budget(
        config.episodes.max(1),
        config.c_beta,
        env.features().dim(),
        hor,
        config.delta,
        gap_input,
    );
    let beta = compute_beta(config.c_beta, env.features().dim(), hor, k_budget, config.delta)?;
    let mut agent = LinQAgent::with_beta(env.features_arc(), beta, gap_input)?;
    if config.monitors.index_sets {
        agent.enable_index_tracking();
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);

    let mut series = SeriesBuilder::new();
    let mut suffix_ok = true;
    let mut worst_residual = 0.0_f64;
    let mut opt_low = 0.0_f64;
    let mut opt_high = f64::NEG_INFINITY;
    let mut xi2 = 0.0_f64;
    let mut prev_counts = vec![0u64; hor];

    while agent.episodes_completed() < config.episodes {
        let episode_index = agent.episodes_completed() + 1;
        let s1 = if agent.resume_step() == 1 {
            initial_state(config.initial_state_mode, episode_index, ns, &mut rng)
        } else {
            0 // ignored: the path copies its prefix
        };
        let path = agent.sample_path(mdp, s1, &mut rng);
        // π_k: the greedy policy the path just acted under (its parameters
        // are untouched until the pass below).
        let policy = policy_table(hor, ns, na, |h, s| agent.greedy_action(h, s));
        let values = policy_evaluate(mdp, &policy);
        let per_path_regret = (dp.v(0, path.states[0]) - values[path.states[0]]).max(0.0);

        let stop = agent.backward_pass(&path);

        // Updated steps form the suffix [stop, H−1] (0-based): exactly those
        // counts grew by one, which is what keeps the index sets nested.
        let counts = agent.index_counts();
        for h in 0..hor {
            let grew = counts[h] - prev_counts[h];
            let expected = u64::from(h >= stop);
            if grew != expected {
                suffix_ok = false;
            }
        }
        prev_counts = counts;

        if config.monitors.regression_identity {
            worst_residual = worst_residual.max(agent.max_regression_residual());
        }
        if config.monitors.optimism {
            for h in 0..hor {
                let (s, a) = (path.states[h], path.actions[h]);
                let diff = agent.q_estimate(h, s, a) - dp.q(h, s, a);
                let slack = diff
                    - 2.0 * agent.bonus(h, s, a, crate::agent::BonusSnapshot::Current);
                opt_low = opt_low.min(diff);
                opt_high = opt_high.max(slack);
            }
        }
        if config.monitors.martingale {
            // ξ₂ gains (P_{h,s,a} − 1_{s'})·(V⋆_{h+1} − V^{π_k}_{h+1}) for
            // every step the pass updated.
            for h in stop..hor {
                let (s, a) = (path.states[h], path.actions[h]);
                let row = mdp.transition_row(h, s, a);
                let mut expectation = 0.0;
                for (sn, p) in row.iter().enumerate() {
                    expectation += p * (dp.v(h + 1, sn) - values[(h + 1) * ns + sn]);
                }
                let realized =
                    dp.v(h + 1, path.states[h + 1]) - values[(h + 1) * ns + path.states[h + 1]];
                xi2 += expectation - realized;
            }
        }

        let episode_regret = (stop == 0).then(|| {
            // Route 2: re-evaluate the recorded policy snapshot fresh.
            let snapshot_values = policy_evaluate(mdp, &policy);
            (dp.v(0, path.states[0]) - snapshot_values[path.states[0]]).max(0.0)
        });
        series.push_path(&path, hor, episode_index, per_path_regret, episode_regret);
    }

    let index_counts = agent.index_counts();
    let nesting_sets_ok = if config.monitors.index_sets {
        (0..hor.saturating_sub(1)).all(|h| {
            let lower = agent.regressor(h).index_set();
            let upper = agent.regressor(h + 1).index_set();
            // Both sets are increasing sequences; subset check by merge.
            let mut it = upper.iter();
            lower.iter().all(|x| it.any(|y| y == x))
        })
    } else {
        true
    };
    let counts_monotone = index_counts.windows(2).all(|w| w[0] <= w[1]);
    let terminal_counts_ok = config.episodes == 0
        || (index_counts.first() == Some(&agent.episodes_completed())
            && index_counts.last() == Some(&agent.paths_sampled()));
    let index_structure = MonitorVerdict {
        pass: suffix_ok && nesting_sets_ok && counts_monotone && terminal_counts_ok,
        worst: 0.0,
    };

    let dim = env.features().dim() as f64;
    let mut elliptical_worst = f64::NEG_INFINITY;
    let mut elliptical_pass = true;
    for h in 0..hor {
        let bound = 2.0 * dim * ((index_counts[h] as f64 / dim) + 1.0).ln();
        let excess = agent.regressor(h).potential_sum() - bound;
        elliptical_worst = elliptical_worst.max(excess);
        if excess > ELLIPTICAL_SLACK {
            elliptical_pass = false;
        }
    }
    if hor == 0 {
        elliptical_worst = 0.0;
    }

    let consistency = series.consistency_gap();
    let martingale = config.monitors.martingale.then(|| {
        let k = agent.paths_sampled() as f64;
        let h = hor as f64;
        let bound = h * (h * k * (2.0 / config.delta).ln()).sqrt();
        MartingaleVerdict { pass: xi2.abs() <= bound, statistic: xi2.abs(), bound }
    });
    let monitors = MonitorReport {
        elliptical: MonitorVerdict { pass: elliptical_pass, worst: elliptical_worst },
        index_structure,
        episode_path_consistency: MonitorVerdict {
            pass: consistency <= CONSISTENCY_TOLERANCE,
            worst: consistency,
        },
        regression_identity: config.monitors.regression_identity.then(|| MonitorVerdict {
            pass: worst_residual <= REGRESSION_IDENTITY_TOLERANCE,
            worst: worst_residual,
        }),
        optimism: config.monitors.optimism.then(|| OptimismVerdict {
            pass: opt_low >= -OPTIMISM_SLACK && opt_high <= OPTIMISM_SLACK,
            worst_low: opt_low,
            worst_high: if opt_high == f64::NEG_INFINITY { 0.0 } else { opt_high },
        }),
        martingale,
    };

    let bounds = evaluate_regret_bounds(&series.totals, env, config, gap_input, &index_counts);
    let totals = series.totals;
    Ok(RegretLog {
        agent: AgentKind::Linq,
        env: env.meta().clone(),
        episodes: totals.episodes,
        paths: totals.paths,
        revisits: totals.paths - totals.episodes,
        samples: totals.samples,
        delta: config.delta,
        c_beta: config.c_beta,
        beta,
        k_budget,
        seed: config.seed,
        initial_state_mode: config.initial_state_mode,
        gap_input: gap_input.is_finite().then_some(gap_input),
        gap_override_exceeds_certified: override_exceeds,
        cumulative_path_regret: totals.cumulative_path_regret,
        cumulative_episode_regret: totals.cumulative_episode_regret,
        average_episode_regret: if totals.episodes == 0 {
            0.0
        } else {
            totals.cumulative_episode_regret / totals.episodes as f64
        },
        index_counts,
        monitors,
        bounds: Some(bounds),
        series: series.records,
    })
}

fn run_baseline(env: &Environment, config: &ExperimentConfig) -> Result<RegretLog, HarnessError> {
    let mdp = env.mdp();
    let dp = env.dp();
    let (hor, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let k_budget = config.episodes.max(1);
    let beta = compute_beta(config.c_beta, env.features().dim(), hor, k_budget, config.delta)?;
    let mut agent = BaselineAgent::new(env.features_arc(), beta)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);
    let mut series = SeriesBuilder::new();

    for episode_index in 1..=config.episodes {
        let s1 = initial_state(config.initial_state_mode, episode_index, ns, &mut rng);
        let policy = policy_table(hor, ns, na, |h, s| agent.greedy_action(h, s));
        let values = policy_evaluate(mdp, &policy);
        let path = agent.episode(mdp, s1, &mut rng);
        let regret = (dp.v(0, s1) - values[s1]).max(0.0);
        series.push_path(&path, hor, episode_index, regret, Some(regret));
    }

    let consistency = series.consistency_gap();
    let totals = series.totals;
    Ok(RegretLog {
        agent: AgentKind::BaselineLsvi,
        env: env.meta().clone(),
        episodes: totals.episodes,
        paths: totals.paths,
        revisits: 0,
        samples: totals.samples,
        delta: config.delta,
        c_beta: config.c_beta,
        beta,
        k_budget,
        seed: config.seed,
        initial_state_mode: config.initial_state_mode,
        gap_input: None,
        gap_override_exceeds_certified: false,
        cumulative_path_regret: totals.cumulative_path_regret,
        cumulative_episode_regret: totals.cumulative_episode_regret,
        average_episode_regret: if totals.episodes == 0 {
            0.0
        } else {
            totals.cumulative_episode_regret / totals.episodes as f64
        },
        index_counts: vec![config.episodes; hor],
        monitors: trivial_monitors(consistency),
        bounds: None,
        series: series.records,
    })
}

/// Oracle-greedy and uniform-random reference runs: no learning state, one
/// path per episode, exact evaluation of the fixed policy.
fn run_reference(env: &Environment, config: &ExperimentConfig) -> Result<RegretLog, HarnessError> {
    let mdp = env.mdp();
    let dp = env.dp();
    let (hor, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);
    let uniform_values = matches!(config.agent, AgentKind::UniformRandom)
        .then(|| uniform_policy_values(mdp));
    let mut series = SeriesBuilder::new();

    for episode_index in 1..=config.episodes {
        let s1 = initial_state(config.initial_state_mode, episode_index, ns, &mut rng);
        let regret = match &uniform_values {
            // Exact stochastic-policy evaluation; sampling below only
            // consumes the stream so traces stay reproducible.
            Some(values) => (dp.v(0, s1) - values[s1]).max(0.0),
            None => {
                let values = policy_evaluate(mdp, dp.greedy_policy());
                (dp.v(0, s1) - values[s1]).max(0.0)
            }
        };
        let mut states = vec![0usize; hor + 1];
        let mut actions = vec![0usize; hor];
        let mut rewards = vec![0.0; hor];
        states[0] = s1;
        for h in 0..hor {
            let a = match config.agent {
                AgentKind::UniformRandom => next_index(&mut rng, na),
                _ => dp.greedy_policy().action(h, states[h]),
            };
            actions[h] = a;
            rewards[h] = mdp.reward_at(h, states[h], a);
            states[h + 1] = crate::mdp::sample_next_state(mdp, h, states[h], a, &mut rng);
        }
        let path = PathBuffer {
            path_index: episode_index,
            start_step: 1,
            states,
            actions,
            rewards,
        };
        series.push_path(&path, hor, episode_index, regret, Some(regret));
    }

    let consistency = series.consistency_gap();
    let totals = series.totals;
    Ok(RegretLog {
        agent: config.agent,
        env: env.meta().clone(),
        episodes: totals.episodes,
        paths: totals.paths,
        revisits: 0,
        samples: totals.samples,
        delta: config.delta,
        c_beta: config.c_beta,
        beta: 0.0,
        k_budget: config.episodes.max(1),
        seed: config.seed,
        initial_state_mode: config.initial_state_mode,
        gap_input: None,
        gap_override_exceeds_certified: false,
        cumulative_path_regret: totals.cumulative_path_regret,
        cumulative_episode_regret: totals.cumulative_episode_regret,
        average_episode_regret: if totals.episodes == 0 {
            0.0
        } else {
            totals.cumulative_episode_regret / totals.episodes as f64
        },
        index_counts: vec![0; hor],
        monitors: trivial_monitors(consistency),
        bounds: None,
        series: series.records,
    })
}

fn trivial_monitors(consistency: f64) -> MonitorReport {
    MonitorReport {
        elliptical: MonitorVerdict { pass: true, worst: 0.0 },
        index_structure: MonitorVerdict { pass: true, worst: 0.0 },
        episode_path_consistency: MonitorVerdict {
            pass: consistency <= CONSISTENCY_TOLERANCE,
            worst: consistency,
        },
        regression_identity: None,
        optimism: None,
        martingale: None,
    }
}
