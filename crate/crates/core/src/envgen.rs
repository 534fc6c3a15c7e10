//! Environment generators with certified sub-optimality gaps.
//!
//! Three families are supported, all validated the same way: solve the
//! instance exactly, certify gap_global ≥ gap_min, and certify linear
//! realizability of Q⋆ by regression (residual ≤ 1e−9, ‖θ̂_h‖₂ ≤ 2H√d).
//! Instances failing any check are rejected and redrawn from a derived-seed
//! chain, up to `max_rejections`.
//!
//! * `linear_mdp` — a linear MDP over d anchor state-action pairs: anchor
//!   pairs carry basis features e_j with transition row μ_j and reward w_j;
//!   every other pair gets a convex combination of at most two anchors,
//!   chosen so its Q⋆ value hits a designed target inside the anchor-value
//!   hull. Targets within a state are either exact ties or sit at least
//!   gap_min·1.05 below the state optimum, which makes the rejection loop
//!   terminate quickly even at small gap_min. Linear-MDP structure gives
//!   Q⋆_h = ⟨φ_h, w_h + μ_h V⋆_{h+1}⟩, so realizability holds by
//!   construction and is re-verified post hoc.
//! * `tabular_onehot` — one-hot features (d = |S||A|), fully random rows and
//!   rewards; gap enforced purely by rejection.
//! * `deterministic_chain` — next(s,a) = (s + 1 + a) mod |S|, reward a/|A|
//!   at every step; the gap is exactly 1/|A| and no randomness is used.

use crate::linalg;
use crate::mdp::{
    self, dp_solve, fit_linear_q, DpSolution, FeatureMap, FiniteMdp, LinearQFit, MdpError,
};
use rand_core::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Fitted-realizability tolerance for accepted environments.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;
/// Multiplicative design margin over gap_min, absorbing float rounding in
/// realized targets.
const GAP_DESIGN_MARGIN: f64 = 1.05;

pub const DEFAULT_MAX_REJECTIONS: u32 = 1000;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid spec: {reason}")]
    InvalidSpec { reason: String },
    #[error(
        "gap {gap_min} not achieved after {attempts} attempts (best certified gap {best_gap})"
    )]
    GapNotAchieved { gap_min: f64, best_gap: f64, attempts: u32 },
    #[error("environment fails validation: {0}")]
    Invariant(#[from] MdpError),
    #[error("realizability residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e}")]
    Realizability { residual: f64 },
    #[error("fitted parameter norm {norm} at step {h} exceeds the 2H√d bound {bound}")]
    ThetaNorm { h: usize, norm: f64, bound: f64 },
    #[error("stored gap {stored} disagrees with recomputed gap {computed}")]
    GapMismatch { stored: f64, computed: f64 },
    #[error("{context}: {detail}")]
    Inconsistent { context: &'static str, detail: String },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    LinearMdp,
    TabularOnehot,
    DeterministicChain,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::LinearMdp => "linear_mdp",
            EnvKind::TabularOnehot => "tabular_onehot",
            EnvKind::DeterministicChain => "deterministic_chain",
        }
    }
}

fn default_max_rejections() -> u32 {
    DEFAULT_MAX_REJECTIONS
}

/// Generation request. `d` must equal |S||A| for the one-hot kinds and may
/// not exceed it for `linear_mdp`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub gap_min: f64,
    pub seed: u64,
    #[serde(default = "default_max_rejections")]
    pub max_rejections: u32,
}

impl EnvSpec {
    pub fn new(
        kind: EnvKind,
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        dim: usize,
        gap_min: f64,
        seed: u64,
    ) -> Self {
        EnvSpec {
            kind,
            horizon,
            num_states,
            num_actions,
            dim,
            gap_min,
            seed,
            max_rejections: DEFAULT_MAX_REJECTIONS,
        }
    }

    /// One-hot kinds force d = |S||A|.
    pub fn one_hot_dim(num_states: usize, num_actions: usize) -> usize {
        num_states * num_actions
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let fail = |reason: String| Err(GenError::InvalidSpec { reason });
        if self.horizon == 0 || self.num_states == 0 || self.num_actions == 0 || self.dim == 0 {
            return fail("H, S, A, d must all be positive".into());
        }
        if self.max_rejections == 0 {
            return fail("max_rejections must be positive".into());
        }
        if !(self.gap_min > 0.0) {
            return fail(format!("gap_min must be positive, got {}", self.gap_min));
        }
        let sa = self.num_states * self.num_actions;
        match self.kind {
            EnvKind::LinearMdp if self.dim > sa => {
                fail(format!("linear_mdp requires d ≤ |S||A| = {sa}, got {}", self.dim))
            }
            EnvKind::TabularOnehot | EnvKind::DeterministicChain if self.dim != sa => {
                fail(format!("{} requires d = |S||A| = {sa}, got {}", self.kind.as_str(), self.dim))
            }
            _ => Ok(()),
        }
    }
}

/// Identity block carried in environment files and run summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub kind: EnvKind,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub seed: u64,
    /// Certified gap; `null` encodes +∞ (no sub-optimal action anywhere).
    pub gap: Option<f64>,
}

/// A validated environment: the true MDP, its feature map, the exact DP
/// solution, and the certification artifacts.
#[derive(Clone, Debug)]
pub struct Environment {
    meta: EnvMeta,
    mdp: FiniteMdp,
    features: Arc<FeatureMap>,
    dp: DpSolution,
    fit: LinearQFit,
    certified_gap: f64,
}

impl Environment {
    /// Validate and certify an (mdp, features) pair. Fails when the fitted
    /// residual or parameter norms violate the realizability contract.
    pub fn assemble(
        kind: EnvKind,
        seed: u64,
        mdp: FiniteMdp,
        features: FeatureMap,
    ) -> Result<Self, GenError> {
        if features.horizon() != mdp.horizon()
            || features.num_states() != mdp.num_states()
            || features.num_actions() != mdp.num_actions()
        {
            return Err(GenError::Inconsistent {
                context: "feature map shape",
                detail: format!(
                    "features cover H={} S={} A={}, mdp has H={} S={} A={}",
                    features.horizon(),
                    features.num_states(),
                    features.num_actions(),
                    mdp.horizon(),
                    mdp.num_states(),
                    mdp.num_actions()
                ),
            });
        }
        let dp = dp_solve(&mdp);
        let fit = fit_linear_q(&mdp, &features, &dp)?;
        if fit.max_residual > RESIDUAL_TOLERANCE {
            return Err(GenError::Realizability { residual: fit.max_residual });
        }
        let bound = 2.0 * mdp.horizon() as f64 * (features.dim() as f64).sqrt();
        for (h, &norm) in fit.theta_norms.iter().enumerate() {
            if norm > bound {
                return Err(GenError::ThetaNorm { h, norm, bound });
            }
        }
        let certified_gap = dp.gap_global();
        let meta = EnvMeta {
            kind,
            horizon: mdp.horizon(),
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            dim: features.dim(),
            seed,
            gap: certified_gap.is_finite().then_some(certified_gap),
        };
        Ok(Environment {
            meta,
            mdp,
            features: Arc::new(features),
            dp,
            fit,
            certified_gap,
        })
    }

    pub fn meta(&self) -> &EnvMeta {
        &self.meta
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn features_arc(&self) -> Arc<FeatureMap> {
        Arc::clone(&self.features)
    }

    pub fn dp(&self) -> &DpSolution {
        &self.dp
    }

    pub fn fit(&self) -> &LinearQFit {
        &self.fit
    }

    /// dp.gap_global; +∞ when every action everywhere is optimal.
    pub fn certified_gap(&self) -> f64 {
        self.certified_gap
    }
}

/// Canonical SplitMix64 step, used to derive per-attempt seeds.
pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn unit_f64(rng: &mut impl RngCore) -> f64 {
    mdp::sampling::unit_f64(rng)
}

/// Uniform index in [0, n) by rejection, unbiased and reproducible.
pub(crate) fn next_index(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % n) as usize;
        }
    }
}

/// Random probability vector over `n` outcomes (normalized exponentials).
fn random_simplex(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -unit_f64(rng).max(1e-300).ln()).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

/// Deterministic generation: same spec → bitwise-identical environment.
pub fn generate(spec: &EnvSpec) -> Result<Environment, GenError> {
    spec.validate()?;
    let mut chain = spec.seed;
    let mut best_gap = f64::NEG_INFINITY;
    let mut attempts = 0;
    while attempts < spec.max_rejections {
        attempts += 1;
        let derived = splitmix64(&mut chain);
        let candidate = match spec.kind {
            EnvKind::DeterministicChain => Some(build_chain(spec)?),
            EnvKind::TabularOnehot => Some(build_tabular(spec, derived)?),
            EnvKind::LinearMdp => build_linear(spec, derived)?,
        };
        if let Some((mdp, features)) = candidate {
            match Environment::assemble(spec.kind, spec.seed, mdp, features) {
                Ok(env) => {
                    if env.certified_gap() >= spec.gap_min {
                        return Ok(env);
                    }
                    best_gap = best_gap.max(env.certified_gap());
                }
                // realizability rejects count like gap rejects
                Err(GenError::Realizability { .. }) | Err(GenError::ThetaNorm { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if spec.kind == EnvKind::DeterministicChain {
            // seed-independent construction: retries cannot change the outcome
            break;
        }
    }
    Err(GenError::GapNotAchieved { gap_min: spec.gap_min, best_gap, attempts })
}

/// next(s,a) = (s + 1 + a) mod |S|; r_h(s,a) = a/|A| at every (h,s).
/// All state values coincide, so the gap is exactly 1/|A| (∞ when |A| = 1).
fn build_chain(spec: &EnvSpec) -> Result<(FiniteMdp, FeatureMap), GenError> {
    let (hor, ns, na) = (spec.horizon, spec.num_states, spec.num_actions);
    let mut transition = vec![0.0; hor * ns * na * ns];
    let mut reward = vec![0.0; hor * ns * na];
    for h in 0..hor {
        for s in 0..ns {
            for a in 0..na {
                let next = (s + 1 + a) % ns;
                transition[((h * ns + s) * na + a) * ns + next] = 1.0;
                reward[(h * ns + s) * na + a] = a as f64 / na as f64;
            }
        }
    }
    let mdp = FiniteMdp::new(hor, ns, na, transition, reward)?;
    Ok((mdp, FeatureMap::one_hot(hor, ns, na)))
}

fn build_tabular(spec: &EnvSpec, derived_seed: u64) -> Result<(FiniteMdp, FeatureMap), GenError> {
    let (hor, ns, na) = (spec.horizon, spec.num_states, spec.num_actions);
    let mut rng = Xoshiro256StarStar::seed_from_u64(derived_seed);
    let mut transition = Vec::with_capacity(hor * ns * na * ns);
    let mut reward = Vec::with_capacity(hor * ns * na);
    for _ in 0..hor * ns * na {
        transition.extend(random_simplex(&mut rng, ns));
        reward.push(unit_f64(&mut rng));
    }
    let mdp = FiniteMdp::new(hor, ns, na, transition, reward)?;
    Ok((mdp, FeatureMap::one_hot(hor, ns, na)))
}

/// One designed attempt at a linear MDP. Returns `None` when the random
/// anchor layout leaves no room for the requested gap (a rejection).
fn build_linear(
    spec: &EnvSpec,
    derived_seed: u64,
) -> Result<Option<(FiniteMdp, FeatureMap)>, GenError> {
    let (hor, ns, na, d) = (spec.horizon, spec.num_states, spec.num_actions, spec.dim);
    let gap_eff = spec.gap_min * GAP_DESIGN_MARGIN;
    let mut rng = Xoshiro256StarStar::seed_from_u64(derived_seed);

    // Per step: d distinct anchor pairs, their transition rows μ_j and
    // reward weights w_j (stratified over [0,1) so the θ range stays wide).
    let sa = ns * na;
    let mut anchor_of = vec![vec![usize::MAX; sa]; hor]; // (h, s·A+a) → anchor index or MAX
    let mut mu = vec![Vec::new(); hor];
    let mut w = vec![Vec::new(); hor];
    for h in 0..hor {
        let mut pool: Vec<usize> = (0..sa).collect();
        for j in 0..d {
            let pick = j + next_index(&mut rng, sa - j);
            pool.swap(j, pick);
            anchor_of[h][pool[j]] = j;
        }
        mu[h] = (0..d).map(|_| random_simplex(&mut rng, ns)).collect();
        let mut strata: Vec<usize> = (0..d).collect();
        for j in (1..d).rev() {
            strata.swap(j, next_index(&mut rng, j + 1));
        }
        w[h] = strata.iter().map(|&k| (k as f64 + unit_f64(&mut rng)) / d as f64).collect();
    }

    let mut transition = vec![0.0; hor * sa * ns];
    let mut reward = vec![0.0; hor * sa];
    let mut phi = vec![0.0; hor * sa * d];
    let mut v_next = vec![0.0; ns]; // designed V⋆_{h+1}

    for h in (0..hor).rev() {
        // θ⋆_h = w_h + μ_h·V⋆_{h+1}, entrywise nonnegative. Convex
        // combinations of anchors realize any target in [tmin, tmax].
        let theta: Vec<f64> = (0..d)
            .map(|j| w[h][j] + linalg::dot(&mu[h][j], &v_next))
            .collect();
        let tmin = theta.iter().cloned().fold(f64::INFINITY, f64::min);
        let tmax = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut v_here = vec![0.0; ns];

        for s in 0..ns {
            // fixed anchor targets at this state
            let mut fmax = f64::NEG_INFINITY;
            for a in 0..na {
                let j = anchor_of[h][s * na + a];
                if j != usize::MAX {
                    fmax = fmax.max(theta[j]);
                }
            }
            let have_anchor = fmax > f64::NEG_INFINITY;
            if have_anchor {
                // two anchors in one state must tie or differ by ≥ gap_eff
                for a in 0..na {
                    let j = anchor_of[h][s * na + a];
                    if j != usize::MAX {
                        let deficit = fmax - theta[j];
                        if deficit > 1e-12 && deficit < gap_eff {
                            return Ok(None);
                        }
                    }
                }
            }

            // choose the state optimum v_s: either tie the best anchor or
            // draw above it, leaving ≥ gap_eff of room for sub-optimal
            // targets (which must stay inside the hull, hence ≥ tmin)
            let draw_lo = if have_anchor {
                fmax + gap_eff
            } else {
                tmin + gap_eff
            };
            let can_draw = tmax >= draw_lo;
            let v_s = if have_anchor {
                if can_draw && unit_f64(&mut rng) < 0.5 {
                    draw_lo + unit_f64(&mut rng) * (tmax - draw_lo)
                } else {
                    fmax
                }
            } else if can_draw {
                draw_lo + unit_f64(&mut rng) * (tmax - draw_lo)
            } else {
                // hull narrower than the gap: make the whole state tie
                tmin + unit_f64(&mut rng) * (tmax - tmin)
            };
            v_here[s] = v_s;

            // assign per-action targets and realize them as features
            let has_room = v_s - gap_eff >= tmin;
            let mut attained = have_anchor && v_s == fmax;
            for a in 0..na {
                let pair = s * na + a;
                let j = anchor_of[h][pair];
                let target = if j != usize::MAX {
                    theta[j]
                } else if !attained {
                    attained = true;
                    v_s
                } else if has_room && unit_f64(&mut rng) >= 0.2 {
                    tmin + unit_f64(&mut rng) * (v_s - gap_eff - tmin)
                } else {
                    v_s // deliberate tie, exercises multi-optimal states
                };
                realize_target(
                    target, &theta, j, &mu[h], &w[h], &mut rng,
                    &mut phi[(h * sa + pair) * d..(h * sa + pair + 1) * d],
                    &mut transition[(h * sa + pair) * ns..(h * sa + pair + 1) * ns],
                    &mut reward[(h * sa + pair)..(h * sa + pair) + 1],
                );
            }
        }
        v_next = v_here;
    }

    let mdp = FiniteMdp::new(hor, ns, na, transition, reward)?;
    let features = FeatureMap::new(hor, ns, na, d, phi)?;
    Ok(Some((mdp, features)))
}

/// Write φ, the transition row, and the reward for one (s,a) so that
/// ⟨φ, θ⟩ = target. Anchors (j ≠ MAX) take the basis vector e_j; other pairs
/// combine at most two anchors with convex weights, giving ‖φ‖₂ ≤ 1,
/// P = φᵀμ, and r = ⟨φ, w⟩ exactly.
#[allow(clippy::too_many_arguments)]
fn realize_target(
    target: f64,
    theta: &[f64],
    anchor: usize,
    mu: &[Vec<f64>],
    w: &[f64],
    rng: &mut impl RngCore,
    phi_out: &mut [f64],
    row_out: &mut [f64],
    reward_out: &mut [f64],
) {
    let d = theta.len();
    let weights: Vec<(usize, f64)> = if anchor != usize::MAX {
        vec![(anchor, 1.0)]
    } else {
        // random anchors on either side of the target (inside the hull both
        // filters are nonempty by construction)
        let below: Vec<usize> = (0..d).filter(|&j| theta[j] <= target).collect();
        let above: Vec<usize> = (0..d).filter(|&j| theta[j] >= target).collect();
        let lo = below[next_index(rng, below.len())];
        let hi = above[next_index(rng, above.len())];
        if theta[hi] - theta[lo] <= 1e-12 {
            vec![(hi, 1.0)]
        } else {
            let t = (target - theta[lo]) / (theta[hi] - theta[lo]);
            vec![(hi, t), (lo, 1.0 - t)]
        }
    };

    for &(j, wt) in &weights {
        phi_out[j] += wt;
        reward_out[0] += wt * w[j];
        for (next, &p) in mu[j].iter().enumerate() {
            row_out[next] += wt * p;
        }
    }
    // convex weights give total mass 1 up to rounding; renormalize exactly
    let total: f64 = row_out.iter().sum();
    row_out.iter_mut().for_each(|p| *p /= total);
    reward_out[0] = reward_out[0].clamp(0.0, 1.0);
}

// --- serialization -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EnvFile {
    meta: EnvMeta,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    reward: Vec<Vec<Vec<f64>>>,
    phi: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn to_json(env: &Environment) -> String {
    let meta = env.meta().clone();
    let (hor, ns, na) = (meta.horizon, meta.num_states, meta.num_actions);
    let mdp = env.mdp();
    let features = env.features();
    let transition = (0..hor)
        .map(|h| {
            (0..ns)
                .map(|s| (0..na).map(|a| mdp.transition_row(h, s, a).to_vec()).collect())
                .collect()
        })
        .collect();
    let reward = (0..hor)
        .map(|h| {
            (0..ns)
                .map(|s| (0..na).map(|a| mdp.reward_at(h, s, a)).collect())
                .collect()
        })
        .collect();
    let phi = (0..hor)
        .map(|h| {
            (0..ns)
                .map(|s| (0..na).map(|a| features.features(h, s, a).to_vec()).collect())
                .collect()
        })
        .collect();
    let file = EnvFile { meta, transition, reward, phi };
    let mut out = serde_json::to_string(&file).expect("environment serializes");
    out.push('\n');
    out
}

pub fn from_json(text: &str) -> Result<Environment, GenError> {
    let file: EnvFile = serde_json::from_str(text)?;
    let meta = file.meta;
    let (hor, ns, na, d) = (meta.horizon, meta.num_states, meta.num_actions, meta.dim);
    if hor == 0 || ns == 0 || na == 0 || d == 0 {
        return Err(GenError::Inconsistent {
            context: "meta",
            detail: "H, S, A, d must all be positive".into(),
        });
    }

    let mut transition = Vec::with_capacity(hor * ns * na * ns);
    let mut reward = Vec::with_capacity(hor * ns * na);
    let mut phi = Vec::with_capacity(hor * ns * na * d);
    let shape_err = |context: &'static str| GenError::Inconsistent {
        context,
        detail: "nested array shape disagrees with meta".into(),
    };
    if file.transition.len() != hor || file.reward.len() != hor || file.phi.len() != hor {
        return Err(shape_err("step count"));
    }
    for h in 0..hor {
        if file.transition[h].len() != ns || file.reward[h].len() != ns || file.phi[h].len() != ns {
            return Err(shape_err("state count"));
        }
        for s in 0..ns {
            if file.transition[h][s].len() != na
                || file.reward[h][s].len() != na
                || file.phi[h][s].len() != na
            {
                return Err(shape_err("action count"));
            }
            for a in 0..na {
                if file.transition[h][s][a].len() != ns {
                    return Err(shape_err("transition row length"));
                }
                if file.phi[h][s][a].len() != d {
                    return Err(shape_err("feature length"));
                }
                transition.extend_from_slice(&file.transition[h][s][a]);
                reward.push(file.reward[h][s][a]);
                phi.extend_from_slice(&file.phi[h][s][a]);
            }
        }
    }

    let mdp = FiniteMdp::new(hor, ns, na, transition, reward)?;
    let features = FeatureMap::new(hor, ns, na, d, phi)?;
    let env = Environment::assemble(meta.kind, meta.seed, mdp, features)?;
    let stored = meta.gap.unwrap_or(f64::INFINITY);
    let computed = env.certified_gap();
    let agree = if stored.is_finite() && computed.is_finite() {
        (stored - computed).abs() <= 1e-9
    } else {
        stored == computed
    };
    if !agree {
        return Err(GenError::GapMismatch { stored, computed });
    }
    Ok(env)
}

pub fn save(env: &Environment, path: &Path) -> Result<(), GenError> {
    Ok(std::fs::write(path, to_json(env))?)
}

pub fn load(path: &Path) -> Result<Environment, GenError> {
    from_json(&std::fs::read_to_string(path)?)
}
