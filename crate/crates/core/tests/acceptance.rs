//! Acceptance gate: ten go/no-go criteria covering the revisit bounds, the
//! index-set facts, the optimism sandwich, the elliptical potential, the
//! regret envelope, regret-accounting consistency, linear-algebra health,
//! generator certification, the hand-worked oracle example, and byte-level
//! reproducibility.
//!
//! Each criterion is one test that prints a single `criterion NN [PASS]`
//! line (visible under `cargo test --test acceptance -- --nocapture`) and
//! asserts it. Tolerances are pinned as constants next to their use.

use linq_core::agent::LinQAgent;
use linq_core::envgen::{self, EnvKind, EnvSpec};
use linq_core::harness::{
    default_k_budget, evaluate_regret_bounds, parallel_sweep, run_experiment, summary_json,
    write_series_csv, AgentKind, ExperimentConfig, MonitorFlags, RegretLog, RunTotals,
};
use linq_core::linalg::{cholesky_solve, CovarianceState};
use linq_core::mdp::{dp_solve, FiniteMdp};
use once_cell::sync::Lazy;
use rand_core::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;

/// Empirical-frequency slack for the whole-run optimism event at 50 seeds.
const OPTIMISM_FREQ_SLACK: f64 = 0.10;
/// Average regret at N = 2000 must be ≤ 0.5× its N = 200 value, 10% slack.
const SUBLINEARITY_FACTOR: f64 = 0.5 * 1.1;
const INVERSE_ERROR_TOLERANCE: f64 = 1e-8;
const FIT_RESIDUAL_TOLERANCE: f64 = 1e-9;
const HAND_EXAMPLE_TOLERANCE: f64 = 1e-12;

fn report(criterion: usize, name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {criterion:>2} [{}] {name} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

/// Scalars extracted from a run so sweeps can drop their per-path series.
#[derive(Clone)]
struct LightLog {
    label: String,
    episodes: u64,
    paths: u64,
    index_counts: Vec<u64>,
    index_pass: bool,
    elliptical_pass: bool,
    elliptical_worst: f64,
    consistency_pass: bool,
    consistency_worst: f64,
}

fn light(label: String, log: &RegretLog) -> LightLog {
    LightLog {
        label,
        episodes: log.episodes,
        paths: log.paths,
        index_counts: log.index_counts.clone(),
        index_pass: log.monitors.index_structure.pass,
        elliptical_pass: log.monitors.elliptical.pass,
        elliptical_worst: log.monitors.elliptical.worst,
        consistency_pass: log.monitors.episode_path_consistency.pass,
        consistency_worst: log.monitors.episode_path_consistency.worst,
    }
}

fn chain(h: usize, s: usize, a: usize, seed: u64) -> EnvSpec {
    EnvSpec::new(EnvKind::DeterministicChain, h, s, a, s * a, 0.4, seed)
}

fn tabular(h: usize, s: usize, a: usize, gap_min: f64, seed: u64) -> EnvSpec {
    EnvSpec::new(EnvKind::TabularOnehot, h, s, a, s * a, gap_min, seed)
}

/// Twenty environments for the full-constant (c_β = 8) revisit-bound runs.
/// Large certified gaps keep the bonus grind at a few million paths per
/// environment; all satisfy d ≤ 8, H ≤ 6, |S| ≤ 50, |A| ≤ 5, gap ≥ 0.05.
fn revisit_suite() -> Vec<(String, EnvSpec)> {
    let mut specs = Vec::new();
    for seed in 1..=13u64 {
        specs.push((format!("chain-h2-s1-{seed}"), chain(2, 1, 2, seed)));
    }
    for seed in [14u64, 15] {
        specs.push((format!("chain-h2-s2-{seed}"), chain(2, 2, 2, seed)));
    }
    specs.push(("tabular-h2-67".into(), tabular(2, 2, 2, 0.5, 67)));
    specs.push(("tabular-h2-71".into(), tabular(2, 2, 2, 0.4, 71)));
    specs.push(("tabular-h1-13".into(), tabular(1, 3, 2, 0.05, 13)));
    specs.push(("tabular-h1-21".into(), tabular(1, 4, 2, 0.05, 21)));
    specs.push(("tabular-h1-22".into(), tabular(1, 2, 4, 0.05, 22)));
    specs
}

/// Desk-scale runs (every monitor on, explicit index tracking) across the
/// three environment kinds and two bonus scales.
static BATTERY: Lazy<Vec<LightLog>> = Lazy::new(|| {
    let specs = [
        ("tabular-h2", EnvSpec::new(EnvKind::TabularOnehot, 2, 3, 2, 6, 0.05, 17)),
        ("tabular-h3", EnvSpec::new(EnvKind::TabularOnehot, 3, 3, 2, 6, 0.1, 23)),
        ("chain-h3", EnvSpec::new(EnvKind::DeterministicChain, 3, 4, 2, 8, 0.1, 3)),
        ("linear-h3", EnvSpec::new(EnvKind::LinearMdp, 3, 4, 3, 3, 0.1, 41)),
    ];
    let mut out = Vec::new();
    for (label, spec) in specs {
        let env = envgen::generate(&spec).expect("battery environment generates");
        for c_beta in [0.05, 0.15] {
            let mut config = ExperimentConfig::new(AgentKind::Linq, 80, 29);
            config.c_beta = c_beta;
            config.monitors = MonitorFlags::all();
            let log = run_experiment(&env, &config).expect("battery run succeeds");
            out.push(light(format!("{label}-c{c_beta}"), &log));
        }
    }
    out
});

/// Whole-run optimism event across 50 seeds on two stochastic two-state
/// environments at δ = 0.2 (desk-scale c_β = 1 keeps bonuses informative
/// within the runtime budget).
struct OptimismSweep {
    per_env: Vec<(String, usize, usize)>,
    lights: Vec<LightLog>,
}

static OPTIMISM: Lazy<OptimismSweep> = Lazy::new(|| {
    let envs = [
        ("tabular-67", tabular(2, 2, 2, 0.5, 67)),
        ("tabular-71", tabular(2, 2, 2, 0.4, 71)),
    ];
    let mut per_env = Vec::new();
    let mut lights = Vec::new();
    for (label, spec) in envs {
        let env = envgen::generate(&spec).expect("optimism environment generates");
        let configs: Vec<ExperimentConfig> = (0..50u64)
            .map(|seed| {
                let mut config = ExperimentConfig::new(AgentKind::Linq, 40, seed);
                config.delta = 0.2;
                config.c_beta = 1.0;
                config.monitors = MonitorFlags::all();
                config
            })
            .collect();
        let mut ok = 0usize;
        // Chunked so dropped series keep peak memory flat.
        for chunk in configs.chunks(10) {
            for result in parallel_sweep(&env, chunk) {
                let log = result.expect("optimism run succeeds");
                if log.monitors.optimism.as_ref().expect("enabled").pass {
                    ok += 1;
                }
                lights.push(light(format!("{label}-seed{}", log.seed), &log));
            }
        }
        per_env.push((label.to_string(), ok, configs.len()));
    }
    OptimismSweep { per_env, lights }
});

/// Envelope-regime regret runs: N large enough for the sample-size
/// precondition on a two-step bandit chain with certified gap 1/2 and
/// c_β = 1 (feasibility scale; the schedule's constant-8 regime needs
/// billions of episodes for the precondition).
struct EnvelopeSweep {
    episodes: u64,
    precondition_rhs: f64,
    envelope_bound: f64,
    precondition_ok: usize,
    envelope_ok: usize,
    total: usize,
    worst_average_regret: f64,
    sublinearity_ratio: f64,
    lights: Vec<LightLog>,
}

static ENVELOPE: Lazy<EnvelopeSweep> = Lazy::new(|| {
    let env = envgen::generate(&chain(2, 1, 2, 1)).expect("envelope environment generates");
    const EPISODES: u64 = 700_000;
    let configs: Vec<ExperimentConfig> = (0..50u64)
        .map(|seed| {
            let mut config = ExperimentConfig::new(AgentKind::Linq, EPISODES, seed);
            config.c_beta = 1.0;
            config.monitors =
                MonitorFlags { regression_identity: true, ..MonitorFlags::default() };
            config
        })
        .collect();
    let mut stats = EnvelopeSweep {
        episodes: EPISODES,
        precondition_rhs: 0.0,
        envelope_bound: 0.0,
        precondition_ok: 0,
        envelope_ok: 0,
        total: configs.len(),
        worst_average_regret: 0.0,
        sublinearity_ratio: f64::INFINITY,
        lights: Vec::new(),
    };
    for chunk in configs.chunks(4) {
        for result in parallel_sweep(&env, chunk) {
            let log = result.expect("envelope run succeeds");
            let bounds = log.bounds.as_ref().expect("revisiting agent reports bounds");
            assert!(bounds.applicable);
            stats.precondition_rhs = bounds.precondition_rhs;
            stats.envelope_bound = bounds.average_regret_bound;
            stats.precondition_ok += usize::from(bounds.precondition_pass);
            stats.envelope_ok += usize::from(bounds.average_regret_pass);
            stats.worst_average_regret =
                stats.worst_average_regret.max(bounds.average_regret_measured);
            stats.lights.push(light(format!("envelope-seed{}", log.seed), &log));
        }
    }

    let mut short = ExperimentConfig::new(AgentKind::Linq, 200, 7);
    short.c_beta = 1.0;
    let mut long = short.clone();
    long.episodes = 2000;
    let short_log = run_experiment(&env, &short).expect("N=200 run succeeds");
    let long_log = run_experiment(&env, &long).expect("N=2000 run succeeds");
    assert!(short_log.average_episode_regret > 0.0, "trend check needs a nonzero base");
    stats.sublinearity_ratio =
        long_log.average_episode_regret / short_log.average_episode_regret;
    stats.lights.push(light("sublinearity-n200".into(), &short_log));
    stats.lights.push(light("sublinearity-n2000".into(), &long_log));
    stats
});

fn all_lights() -> Vec<LightLog> {
    let mut lights = BATTERY.clone();
    lights.extend(OPTIMISM.lights.iter().cloned());
    lights.extend(ENVELOPE.lights.iter().cloned());
    lights
}

#[test]
fn criterion_01_deterministic_revisit_bounds() {
    let specs = revisit_suite();
    assert_eq!(specs.len(), 20);
    let results: Vec<(String, bool, u64, f64, u64)> = specs
        .par_iter()
        .map(|(label, spec)| {
            let env = envgen::generate(spec).expect("revisit-suite environment generates");
            let gap = env.certified_gap();
            assert!(gap >= 0.05, "{label}: certified gap {gap} below the suite floor");
            let (dim, horizon) = (env.features().dim(), env.mdp().horizon());
            let k_budget = default_k_budget(200, 8.0, dim, horizon, 0.1, gap);
            let mut agent = LinQAgent::new(env.features_arc(), 8.0, 0.1, k_budget, gap)
                .expect("schedule accepts the parameters");
            let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed ^ 0x5eed);
            let mut samples = 0u64;
            while agent.episodes_completed() < 200 {
                let path = agent.sample_path(env.mdp(), 0, &mut rng);
                samples += (horizon - path.start_step + 1) as u64;
                agent.backward_pass(&path);
            }
            let totals = RunTotals {
                episodes: agent.episodes_completed(),
                paths: agent.paths_sampled(),
                samples,
                ..RunTotals::default()
            };
            let config = ExperimentConfig::new(AgentKind::Linq, 200, 0);
            let counts = agent.index_counts();
            let bounds = evaluate_regret_bounds(&totals, &env, &config, gap, &counts);
            (
                label.clone(),
                bounds.revisit_pass && bounds.per_step_revisit_pass,
                bounds.revisits_measured,
                bounds.revisit_bound,
                totals.paths,
            )
        })
        .collect();

    let failures: Vec<&str> =
        results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    let max_revisits = results.iter().map(|r| r.2).max().unwrap();
    let max_paths = results.iter().map(|r| r.4).max().unwrap();
    let pass = report(
        1,
        "revisit bounds on 20 environments at c_beta=8, N=200",
        failures.is_empty(),
        &format!("max K-N {max_revisits}, max K {max_paths}, failures: {failures:?}"),
    );
    assert!(pass, "revisit bound violated on {failures:?}");
}

#[test]
fn criterion_02_index_set_facts() {
    let lights = all_lights();
    let failures: Vec<&str> =
        lights.iter().filter(|l| !l.index_pass).map(|l| l.label.as_str()).collect();
    // |I_1| = N and |I_H| = K are re-checked here on top of the monitors.
    let count_failures: Vec<&str> = lights
        .iter()
        .filter(|l| {
            l.index_counts.first() != Some(&l.episodes)
                || l.index_counts.last() != Some(&l.paths)
        })
        .map(|l| l.label.as_str())
        .collect();
    let pass = report(
        2,
        "index sets nested with |I_1|=N, |I_H|=K",
        failures.is_empty() && count_failures.is_empty(),
        &format!(
            "{} runs checked, structure failures: {failures:?}, count failures: {count_failures:?}",
            lights.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_optimism_sandwich_frequency() {
    let sweep = &*OPTIMISM;
    let delta = 0.2;
    let threshold = 1.0 - delta - OPTIMISM_FREQ_SLACK;
    let mut detail = String::new();
    let mut all = true;
    for (label, ok, total) in &sweep.per_env {
        let frequency = *ok as f64 / *total as f64;
        if frequency < threshold {
            all = false;
        }
        detail.push_str(&format!("{label}: {ok}/{total} "));
    }
    detail.push_str(&format!("(threshold {threshold:.2})"));
    let pass = report(3, "optimism event frequency at delta=0.2, 50 seeds/env", all, &detail);
    assert!(pass);
}

#[test]
fn criterion_04_elliptical_potential_recheck() {
    let lights = all_lights();
    let failures: Vec<&str> =
        lights.iter().filter(|l| !l.elliptical_pass).map(|l| l.label.as_str()).collect();
    let worst =
        lights.iter().map(|l| l.elliptical_worst).fold(f64::NEG_INFINITY, f64::max);
    let pass = report(
        4,
        "elliptical potential within 2d·ln(|I_h|/d+1) on every run",
        failures.is_empty(),
        &format!("{} runs, worst excess {worst:.3e}, failures: {failures:?}", lights.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_05_regret_envelope_and_sublinearity() {
    let sweep = &*ENVELOPE;
    let precondition = sweep.precondition_ok == sweep.total;
    let envelope = sweep.envelope_ok as f64 >= 0.95 * sweep.total as f64;
    let sublinear = sweep.sublinearity_ratio <= SUBLINEARITY_FACTOR;
    let pass = report(
        5,
        "average-regret envelope under the sample-size precondition",
        precondition && envelope && sublinear,
        &format!(
            "N={} >= rhs {:.0} ({}/{} seeds), worst avg regret {:.3e} vs bound {:.3}, \
             N2000/N200 ratio {:.3} <= {:.2}",
            sweep.episodes,
            sweep.precondition_rhs,
            sweep.envelope_ok,
            sweep.total,
            sweep.worst_average_regret,
            sweep.envelope_bound,
            sweep.sublinearity_ratio,
            SUBLINEARITY_FACTOR
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_episode_path_consistency() {
    let lights = all_lights();
    let failures: Vec<&str> =
        lights.iter().filter(|l| !l.consistency_pass).map(|l| l.label.as_str()).collect();
    let worst = lights.iter().map(|l| l.consistency_worst).fold(0.0f64, f64::max);
    let pass = report(
        6,
        "episode vs path regret agreement within 1e-10",
        failures.is_empty(),
        &format!("{} runs, worst gap {worst:.3e}, failures: {failures:?}", lights.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_07_incremental_inverse_matches_direct() {
    let mut worst = 0.0f64;
    for dim in [1usize, 2, 4, 8] {
        let mut cov = CovarianceState::new(dim);
        let mut rng = Xoshiro256StarStar::seed_from_u64(97 + dim as u64);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for step in 0..10_000 {
            let mut phi: Vec<f64> = (0..dim).map(|_| 2.0 * unit() - 1.0).collect();
            let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 {
                phi.iter_mut().for_each(|x| *x /= norm);
            }
            cov.rank_one_update(&phi).expect("dimension matches");
            if step % 500 == 499 || step == 9_999 {
                worst = worst.max(direct_inverse_error(&cov));
            }
        }
    }
    let pass = report(
        7,
        "maintained inverse vs direct Cholesky inversion, 10k updates",
        worst <= INVERSE_ERROR_TOLERANCE,
        &format!("worst max-norm error {worst:.3e} (tolerance {INVERSE_ERROR_TOLERANCE:.0e})"),
    );
    assert!(pass);
}

/// ‖maintained Λ⁻¹ − direct Λ⁻¹‖_max with the direct inverse recomputed
/// column by column from the exactly accumulated Λ.
fn direct_inverse_error(cov: &CovarianceState) -> f64 {
    let d = cov.dim();
    let mut worst = 0.0f64;
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let column = cholesky_solve(cov.lambda(), d, &e).expect("lambda is positive definite");
        for i in 0..d {
            worst = worst.max((column[i] - cov.lambda_inv()[i * d + j]).abs());
        }
    }
    worst
}

#[test]
fn criterion_08_generated_environments_are_realizable() {
    let mut specs = revisit_suite();
    specs.push(("battery-tabular-h2".into(), EnvSpec::new(EnvKind::TabularOnehot, 2, 3, 2, 6, 0.05, 17)));
    specs.push(("battery-tabular-h3".into(), EnvSpec::new(EnvKind::TabularOnehot, 3, 3, 2, 6, 0.1, 23)));
    specs.push(("battery-chain-h3".into(), EnvSpec::new(EnvKind::DeterministicChain, 3, 4, 2, 8, 0.1, 3)));
    specs.push(("battery-linear-h3".into(), EnvSpec::new(EnvKind::LinearMdp, 3, 4, 3, 3, 0.1, 41)));
    specs.push(("linear-d2".into(), EnvSpec::new(EnvKind::LinearMdp, 3, 3, 2, 2, 0.05, 6)));
    specs.push(("linear-d3".into(), EnvSpec::new(EnvKind::LinearMdp, 3, 3, 2, 3, 0.1, 2)));

    let results: Vec<(String, f64, bool)> = specs
        .par_iter()
        .map(|(label, spec)| {
            let env = envgen::generate(spec).expect("environment generates");
            let fit = env.fit();
            let h = env.mdp().horizon() as f64;
            let norm_bound = 2.0 * h * (env.features().dim() as f64).sqrt();
            let norms_ok = fit.theta_norms.iter().all(|&n| n <= norm_bound);
            (label.clone(), fit.max_residual, norms_ok)
        })
        .collect();

    let worst_residual = results.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let failures: Vec<&str> = results
        .iter()
        .filter(|r| r.1 > FIT_RESIDUAL_TOLERANCE || !r.2)
        .map(|r| r.0.as_str())
        .collect();
    let pass = report(
        8,
        "fit residual <= 1e-9 and theta norms <= 2H*sqrt(d) on all environments",
        failures.is_empty(),
        &format!(
            "{} environments, worst residual {worst_residual:.3e}, failures: {failures:?}",
            results.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_hand_example_oracle() {
    // Two-step, two-state, two-action fixture with deterministic moves:
    // at the first step action 0 leads to s0 and action 1 to s1; the second
    // step is absorbing. Backward induction by hand gives
    //   Q(h=1): s0 [0.1, 0.3], s1 [0.9, 0.4]; V(h=1) = [0.3, 0.9]
    //   Q(h=0): s0 [0.3, 1.1], s1 [1.2, 0.9]; V(h=0) = [1.1, 1.2]
    // with gaps 0.8, 0.3, 0.2, 0.5 and global gap 0.2.
    let mut transition = vec![0.0; 16];
    let mut set = |h: usize, s: usize, a: usize, next: usize| {
        transition[((h * 2 + s) * 2 + a) * 2 + next] = 1.0;
    };
    set(0, 0, 0, 0);
    set(0, 0, 1, 1);
    set(0, 1, 0, 0);
    set(0, 1, 1, 1);
    set(1, 0, 0, 0);
    set(1, 0, 1, 0);
    set(1, 1, 0, 1);
    set(1, 1, 1, 1);
    let reward = vec![0.0, 0.2, 0.9, 0.0, 0.1, 0.3, 0.9, 0.4];
    let mdp = FiniteMdp::new(2, 2, 2, transition, reward).expect("fixture is valid");
    let dp = dp_solve(&mdp);

    let expected_q = [
        ((0, 0), [0.3, 1.1]),
        ((0, 1), [1.2, 0.9]),
        ((1, 0), [0.1, 0.3]),
        ((1, 1), [0.9, 0.4]),
    ];
    let mut worst = 0.0f64;
    for ((h, s), q) in expected_q {
        for (a, expected) in q.iter().enumerate() {
            worst = worst.max((dp.q(h, s, a) - expected).abs());
        }
    }
    for ((h, s), expected) in [((0, 0), 1.1), ((0, 1), 1.2), ((1, 0), 0.3), ((1, 1), 0.9)] {
        worst = worst.max((dp.v(h, s) - expected).abs());
    }
    for ((h, s), expected) in [((0, 0), 0.8), ((0, 1), 0.3), ((1, 0), 0.2), ((1, 1), 0.5)] {
        worst = worst.max((dp.gap_at(h, s) - expected).abs());
    }
    worst = worst.max((dp.gap_global() - 0.2).abs());
    let greedy_ok = dp.greedy_policy().action(0, 0) == 1
        && dp.greedy_policy().action(0, 1) == 0
        && dp.greedy_policy().action(1, 0) == 1
        && dp.greedy_policy().action(1, 1) == 0;

    let pass = report(
        9,
        "hand-worked backward-induction fixture",
        worst <= HAND_EXAMPLE_TOLERANCE && greedy_ok,
        &format!("worst deviation {worst:.3e}, greedy actions {}", if greedy_ok { "match" } else { "differ" }),
    );
    assert!(pass);
}

#[test]
fn criterion_10_byte_identical_reruns() {
    let env = envgen::generate(&EnvSpec::new(EnvKind::TabularOnehot, 2, 3, 2, 6, 0.05, 17))
        .expect("environment generates");
    let mut all = true;
    let mut detail = String::new();
    for agent in [AgentKind::Linq, AgentKind::BaselineLsvi, AgentKind::UniformRandom] {
        let mut config = ExperimentConfig::new(agent, 30, 5);
        config.c_beta = 0.1;
        config.monitors = MonitorFlags { regression_identity: true, ..MonitorFlags::default() };
        let first = run_experiment(&env, &config).expect("first run succeeds");
        let second = run_experiment(&env, &config).expect("second run succeeds");
        let summaries_equal = summary_json(&first) == summary_json(&second);
        let mut csv_first = Vec::new();
        let mut csv_second = Vec::new();
        write_series_csv(&first, &mut csv_first).expect("csv writes");
        write_series_csv(&second, &mut csv_second).expect("csv writes");
        let csv_equal = csv_first == csv_second;
        if !(summaries_equal && csv_equal) {
            all = false;
        }
        detail.push_str(&format!(
            "{}: {} ",
            agent.as_str(),
            if summaries_equal && csv_equal { "identical" } else { "diverged" }
        ));
    }
    let pass = report(10, "rerun artifacts byte-identical per (config, seed)", all, detail.trim());
    assert!(pass);
}
