//! Finite-horizon tabular MDPs with exact dynamic programming.
//!
//! An MDP here is the quintuple (S, A, {P_h}, {r_h}, H) with deterministic
//! rewards in [0,1]. [`dp_solve`] runs exact backward induction to produce
//! Q⋆, V⋆, the optimal-action sets, per-state suboptimality gaps
//! Δ_h(s) = V⋆_h(s) − max{Q⋆_h(s,a) : a sub-optimal}, and the global gap.
//! [`fit_linear_q`] regresses Q⋆ onto a feature map to certify linear
//! realizability: Q⋆_h(s,a) = ⟨φ_h(s,a), θ⋆_h⟩ within a residual tolerance.
//!
//! Steps are indexed 0..H internally; file formats and display use 1-based
//! step numbers.

use crate::linalg::{self, LinalgError};
use rand_core::RngCore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row (h={h}, s={s}, a={a}) sums to {sum}, not 1 within 1e-12")]
    BadRowSum { h: usize, s: usize, a: usize, sum: f64 },
    #[error("negative transition probability {value} at (h={h}, s={s}, a={a}, s'={next})")]
    NegativeProbability { h: usize, s: usize, a: usize, next: usize, value: f64 },
    #[error("reward {value} at (h={h}, s={s}, a={a}) outside [0,1]")]
    RewardOutOfRange { h: usize, s: usize, a: usize, value: f64 },
    #[error("feature norm {norm} at (h={h}, s={s}, a={a}) exceeds 1")]
    FeatureNormExceeded { h: usize, s: usize, a: usize, norm: f64 },
    #[error("{context}: expected {expected} entries, got {got}")]
    Shape { context: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("policy action {action} out of range at (h={h}, s={s})")]
    ActionOutOfRange { h: usize, s: usize, action: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Row sums of transition kernels must match 1 within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
/// Actions within this distance of the per-state maximum count as optimal.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Feature vectors may exceed unit norm by at most this much.
pub const FEATURE_NORM_TOLERANCE: f64 = 1e-12;

/// Tabular finite-horizon MDP. Transition rows are stored row-major as
/// `[h][s][a][s']`, rewards as `[h][s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self, MdpError> {
        assert!(horizon > 0 && num_states > 0 && num_actions > 0);
        let rows = horizon * num_states * num_actions;
        if transition.len() != rows * num_states {
            return Err(MdpError::Shape {
                context: "transition table",
                expected: rows * num_states,
                got: transition.len(),
            });
        }
        if reward.len() != rows {
            return Err(MdpError::Shape {
                context: "reward table",
                expected: rows,
                got: reward.len(),
            });
        }
        let mdp = FiniteMdp { horizon, num_states, num_actions, transition, reward };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<(), MdpError> {
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let r = self.reward_at(h, s, a);
                    if !r.is_finite() {
                        return Err(MdpError::NonFinite { context: "reward table" });
                    }
                    if !(0.0..=1.0).contains(&r) {
                        return Err(MdpError::RewardOutOfRange { h, s, a, value: r });
                    }
                    let row = self.transition_row(h, s, a);
                    let mut sum = 0.0;
                    for (next, &p) in row.iter().enumerate() {
                        if !p.is_finite() {
                            return Err(MdpError::NonFinite { context: "transition table" });
                        }
                        if p < 0.0 {
                            return Err(MdpError::NegativeProbability { h, s, a, next, value: p });
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(MdpError::BadRowSum { h, s, a, sum });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn sa_index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let base = self.sa_index(h, s, a) * self.num_states;
        &self.transition[base..base + self.num_states]
    }

    pub fn reward_at(&self, h: usize, s: usize, a: usize) -> f64 {
        self.reward[self.sa_index(h, s, a)]
    }

    pub fn transition_table(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }
}

/// Per-step feature map φ_h(s,a) ∈ ℝᵈ with ‖φ‖₂ ≤ 1, stored `[h][s][a][d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    phi: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        dim: usize,
        phi: Vec<f64>,
    ) -> Result<Self, MdpError> {
        assert!(horizon > 0 && num_states > 0 && num_actions > 0 && dim > 0);
        let expected = horizon * num_states * num_actions * dim;
        if phi.len() != expected {
            return Err(MdpError::Shape { context: "feature table", expected, got: phi.len() });
        }
        let map = FeatureMap { dim, horizon, num_states, num_actions, phi };
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let f = map.features(h, s, a);
                    if !f.iter().all(|x| x.is_finite()) {
                        return Err(MdpError::NonFinite { context: "feature table" });
                    }
                    let norm = linalg::norm2(f);
                    if norm > 1.0 + FEATURE_NORM_TOLERANCE {
                        return Err(MdpError::FeatureNormExceeded { h, s, a, norm });
                    }
                }
            }
        }
        Ok(map)
    }

    /// One-hot features over (s,a), identical at every step: d = |S|·|A|.
    pub fn one_hot(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let d = num_states * num_actions;
        let mut phi = vec![0.0; horizon * d * d];
        for h in 0..horizon {
            for idx in 0..d {
                phi[(h * d + idx) * d + idx] = 1.0;
            }
        }
        FeatureMap::new(horizon, num_states, num_actions, d, phi).expect("one-hot is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn features(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let base = ((h * self.num_states + s) * self.num_actions + a) * self.dim;
        &self.phi[base..base + self.dim]
    }

    pub fn feature_table(&self) -> &[f64] {
        &self.phi
    }
}

/// Deterministic policy: one action per (h, s).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeterministicPolicy {
    horizon: usize,
    num_states: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: Vec<usize>,
    ) -> Result<Self, MdpError> {
        if actions.len() != horizon * num_states {
            return Err(MdpError::Shape {
                context: "policy table",
                expected: horizon * num_states,
                got: actions.len(),
            });
        }
        for h in 0..horizon {
            for s in 0..num_states {
                let a = actions[h * num_states + s];
                if a >= num_actions {
                    return Err(MdpError::ActionOutOfRange { h, s, action: a });
                }
            }
        }
        Ok(DeterministicPolicy { horizon, num_states, actions })
    }

    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[h * self.num_states + s]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

/// Exact solution of a finite MDP: optimal values, optimal-action sets,
/// per-state gaps, and the lowest-index greedy policy.
#[derive(Clone, Debug)]
pub struct DpSolution {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    /// Q⋆, `[h][s][a]`.
    q_star: Vec<f64>,
    /// V⋆ with a terminal zero row, `[h][s]` for h in 0..=H.
    v_star: Vec<f64>,
    /// Actions within TIE_TOLERANCE of the maximum, ascending, per (h,s).
    optimal_actions: Vec<Vec<usize>>,
    /// Δ_h(s); +∞ when every action is optimal.
    gap_hs: Vec<f64>,
    /// min over (h,s) of gap_hs; +∞ iff no state has a sub-optimal action.
    gap_global: f64,
    greedy_policy: DeterministicPolicy,
}

impl DpSolution {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q_star[(h * self.num_states + s) * self.num_actions + a]
    }

    /// V⋆_h(s); valid for h = H too, where it is 0.
    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v_star[h * self.num_states + s]
    }

    pub fn optimal_actions(&self, h: usize, s: usize) -> &[usize] {
        &self.optimal_actions[h * self.num_states + s]
    }

    pub fn gap_at(&self, h: usize, s: usize) -> f64 {
        self.gap_hs[h * self.num_states + s]
    }

    pub fn gap_global(&self) -> f64 {
        self.gap_global
    }

    pub fn greedy_policy(&self) -> &DeterministicPolicy {
        &self.greedy_policy
    }
}

/// Exact backward induction. Q⋆_H(s,a) = r_H(s,a) and
/// Q⋆_h(s,a) = r_h(s,a) + Σ_{s'} P_h(s'|s,a)·V⋆_{h+1}(s').
pub fn dp_solve(mdp: &FiniteMdp) -> DpSolution {
    let (hor, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut q_star = vec![0.0; hor * ns * na];
    let mut v_star = vec![0.0; (hor + 1) * ns];
    let mut optimal_actions = vec![Vec::new(); hor * ns];
    let mut gap_hs = vec![f64::INFINITY; hor * ns];
    let mut greedy = vec![0usize; hor * ns];
    let mut gap_global = f64::INFINITY;

    for h in (0..hor).rev() {
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let mut q = mdp.reward_at(h, s, a);
                let row = mdp.transition_row(h, s, a);
                for (next, &p) in row.iter().enumerate() {
                    q += p * v_star[(h + 1) * ns + next];
                }
                q_star[(h * ns + s) * na + a] = q;
                best = best.max(q);
            }
            v_star[h * ns + s] = best;
            let cell = h * ns + s;
            let mut runner_up = f64::NEG_INFINITY;
            for a in 0..na {
                let q = q_star[cell * na + a];
                if best - q <= TIE_TOLERANCE {
                    optimal_actions[cell].push(a);
                } else {
                    runner_up = runner_up.max(q);
                }
            }
            greedy[cell] = optimal_actions[cell][0];
            if runner_up > f64::NEG_INFINITY {
                gap_hs[cell] = best - runner_up;
                gap_global = gap_global.min(gap_hs[cell]);
            }
        }
    }

    let greedy_policy =
        DeterministicPolicy::new(hor, ns, na, greedy).expect("greedy actions in range");
    DpSolution {
        horizon: hor,
        num_states: ns,
        num_actions: na,
        q_star,
        v_star,
        optimal_actions,
        gap_hs,
        gap_global,
        greedy_policy,
    }
}

/// Exact V^π by backward induction. Returned table has a terminal zero row:
/// index as `[h][s]` for h in 0..=H.
pub fn policy_evaluate(mdp: &FiniteMdp, policy: &DeterministicPolicy) -> Vec<f64> {
    let (hor, ns) = (mdp.horizon(), mdp.num_states());
    assert_eq!(policy.horizon, hor);
    assert_eq!(policy.num_states, ns);
    let mut values = vec![0.0; (hor + 1) * ns];
    for h in (0..hor).rev() {
        for s in 0..ns {
            let a = policy.action(h, s);
            let mut v = mdp.reward_at(h, s, a);
            let row = mdp.transition_row(h, s, a);
            for (next, &p) in row.iter().enumerate() {
                v += p * values[(h + 1) * ns + next];
            }
            values[h * ns + s] = v;
        }
    }
    values
}

/// Least-squares fit of Q⋆ onto the feature map, one θ per step.
#[derive(Clone, Debug)]
pub struct LinearQFit {
    /// θ̂_h per step.
    pub theta: Vec<Vec<f64>>,
    /// max over (h,s,a) of |⟨φ_h(s,a), θ̂_h⟩ − Q⋆_h(s,a)|.
    pub max_residual: f64,
    /// ‖θ̂_h‖₂ per step, for the ‖θ⋆‖ ≤ 2H√d realizability check.
    pub theta_norms: Vec<f64>,
    /// True when any step's normal equations were rank-deficient and the
    /// minimum-norm pseudo-inverse solution was used instead.
    pub rank_deficient: bool,
}

/// Regress q⋆ onto φ step by step. Well-conditioned steps solve the normal
/// equations by Cholesky (exact for one-hot features); rank-deficient steps
/// fall back to an SVD minimum-norm solution and are flagged, not fatal.
pub fn fit_linear_q(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    dp: &DpSolution,
) -> Result<LinearQFit, MdpError> {
    let (hor, ns, na, d) =
        (mdp.horizon(), mdp.num_states(), mdp.num_actions(), features.dim());
    if features.horizon() != hor || features.num_states() != ns || features.num_actions() != na {
        return Err(MdpError::Shape {
            context: "feature map dimensions",
            expected: hor * ns * na,
            got: features.horizon() * features.num_states() * features.num_actions(),
        });
    }
    let mut theta = Vec::with_capacity(hor);
    let mut rank_deficient = false;
    for h in 0..hor {
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for s in 0..ns {
            for a in 0..na {
                let f = features.features(h, s, a);
                let q = dp.q(h, s, a);
                for i in 0..d {
                    rhs[i] += f[i] * q;
                    for j in 0..d {
                        gram[i * d + j] += f[i] * f[j];
                    }
                }
            }
        }
        let th = match linalg::cholesky_solve(&gram, d, &rhs) {
            Ok(th) => th,
            Err(LinalgError::NotPositiveDefinite { .. }) => {
                rank_deficient = true;
                min_norm_lstsq(features, dp, h, ns, na, d)
            }
            Err(e) => return Err(e.into()),
        };
        theta.push(th);
    }

    let mut max_residual = 0.0f64;
    for h in 0..hor {
        for s in 0..ns {
            for a in 0..na {
                let pred = linalg::dot(features.features(h, s, a), &theta[h]);
                max_residual = max_residual.max((pred - dp.q(h, s, a)).abs());
            }
        }
    }
    let theta_norms = theta.iter().map(|t| linalg::norm2(t)).collect();
    Ok(LinearQFit { theta, max_residual, theta_norms, rank_deficient })
}

/// Minimum-norm solution of the step-h regression via SVD.
fn min_norm_lstsq(
    features: &FeatureMap,
    dp: &DpSolution,
    h: usize,
    ns: usize,
    na: usize,
    d: usize,
) -> Vec<f64> {
    let rows = ns * na;
    let a = nalgebra::DMatrix::from_fn(rows, d, |r, c| {
        features.features(h, r / na, r % na)[c]
    });
    let y = nalgebra::DVector::from_fn(rows, |r, _| dp.q(h, r / na, r % na));
    let svd = a.svd(true, true);
    let eps = 1e-10 * svd.singular_values.max().max(1.0);
    let sol = svd.solve(&y, eps).expect("svd computed with both factors");
    sol.iter().copied().collect()
}

/// Sampling conventions shared by agents and generators: one 64-bit draw is
/// mapped to [0,1) as (x >> 11)·2⁻⁵³, and next states come from the inverse
/// CDF over a transition row.
pub mod sampling {
    use rand_core::RngCore;

    /// Uniform draw in [0,1) from exactly one `next_u64` call.
    pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Inverse-CDF sample: smallest index with cumulative mass > u.
    /// Falls back to the last positive entry if rounding pushes u past the
    /// total mass.
    pub fn categorical(row: &[f64], u: f64) -> usize {
        let mut cum = 0.0;
        for (idx, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                return idx;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
    }
}

/// One transition sample using exactly one RNG draw.
pub fn sample_next_state(
    mdp: &FiniteMdp,
    h: usize,
    s: usize,
    a: usize,
    rng: &mut impl RngCore,
) -> usize {
    sampling::categorical(mdp.transition_row(h, s, a), sampling::unit_f64(rng))
}

/// H=2, two states, two actions. Step-1 transitions from s0 are
/// a0→s0, a1→s1; from s1 they are a0→s0, a1→s1. Step-2 rows self-loop.
/// Rewards: r_1(s0,·)=(0, 0.2), r_1(s1,·)=(0.9, 0), r_2(s0,·)=(0.1, 0.3),
/// r_2(s1,·)=(0.9, 0.4). Solves to V⋆_1(s0) = 1.1 with global gap 0.2.
#[cfg(test)]
pub(crate) fn hand_fixture() -> FiniteMdp {
    let mut transition = vec![0.0; 2 * 2 * 2 * 2];
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
    let reward = vec![
        0.0, 0.2, // h=1, s0
        0.9, 0.0, // h=1, s1
        0.1, 0.3, // h=2, s0
        0.9, 0.4, // h=2, s1
    ];
    FiniteMdp::new(2, 2, 2, transition, reward).unwrap()
}
