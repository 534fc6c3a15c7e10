//! Optimistic least-squares value-iteration agents for episodic MDPs whose
//! optimal action-value function is linear in known features.
//!
//! Both agents estimate `Q_h(s,a) = min{⟨φ_h(s,a), θ_h⟩ + b_h(s,a), H}` with
//! the self-normalized bonus `b_h = β·sqrt(φᵀ Λ_h⁻¹ φ)`, where
//! `Λ_h = I + Σ φφᵀ` accumulates the step-`h` design matrix. They differ in
//! what they regress on and when.
//!
//! # The revisiting agent ([`LinQAgent`])
//!
//! Per step `h` the agent keeps, over its update index set `I_h`,
//!
//! ```text
//! Λ_h = I + Σ_{i∈I_h} φ_h^i (φ_h^i)ᵀ         u_h = Σ_{i∈I_h} φ_h^i r_h^i
//! M_h = Σ_{i∈I_h} φ_h^i (φ_{h+1}^i)ᵀ          θ_h = Λ_h⁻¹ (u_h + M_h θ_{h+1})
//! ```
//!
//! so the bootstrapped regression target couples adjacent steps through the
//! cross-moment `M_h` and never contains the bonus — optimism enters only at
//! action-selection time. `φ_{H+1} ≡ 0` and `θ_{H+1} ≡ 0` (virtual terminal
//! step), hence `M_H` stays zero.
//!
//! Sampling follows a state-revisiting protocol. Each *path* copies the
//! previous path's prefix up to `resume_step`, then acts greedily with
//! respect to the current estimates through step `H`. The subsequent
//! backward pass walks `h = H, H−1, …` and keeps updating while the
//! *previous-path* bonus one step below,
//! `b_{h+1}^{k−1}(s_{h+1}^k, a_{h+1}^k)`, is smaller than half the
//! sub-optimality gap fed to the agent: a large bonus there means the target
//! `θ_{h+1}` is still too uncertain to regress against, so the pass stops
//! and the next path revisits from that step. The virtual terminal bonus is
//! zero, so step `H` updates on every pass. When a pass runs all the way to
//! step 0 the episode completes and the next path starts fresh.
//!
//! The previous-path bonus needed by the stop condition is obtained without
//! storing old covariances: during a pass, each step's bonus at the path's
//! own `(s,a)` pair is computed immediately *before* that step's rank-one
//! update and cached — `O(H)` extra memory in place of `O(d²H)` snapshots.
//!
//! # The baseline agent ([`BaselineAgent`])
//!
//! Standard optimistic least-squares value iteration without revisiting:
//! one full trajectory per episode, after which every `θ_h` is refit from
//! scratch against the bonus-inflated targets
//! `r_h^τ + max_a min{⟨φ_{h+1}, θ_{h+1}⟩ + b_{h+1}, H}` over *all* stored
//! episodes. Its bonus thus leaks into the regression targets, which is the
//! behavioural contrast the revisiting agent is designed around.

use std::sync::Arc;

use rand_core::RngCore;
use thiserror::Error;

use crate::linalg::{dot, CovarianceState};
use crate::mdp::{sample_next_state, FeatureMap, FiniteMdp};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    /// The optimism schedule `β = c_β·sqrt(d·H⁴·ln(K·H/δ))` needs a log
    /// argument strictly above 1.
    #[error("optimism schedule needs K·H/δ > 1, got ln argument {argument}")]
    NonpositiveLog { argument: f64 },
    #[error("{what} must be {requirement}, got {value}")]
    InvalidParameter {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

/// β = c_β · sqrt(d · H⁴ · ln(K_budget·H/δ)).
///
/// `k_budget` is the planned total number of paths; β is computed once from
/// it and stays frozen for the whole run.
pub fn compute_beta(
    c_beta: f64,
    dim: usize,
    horizon: usize,
    k_budget: u64,
    delta: f64,
) -> Result<f64, AgentError> {
    if !c_beta.is_finite() || c_beta < 0.0 {
        return Err(AgentError::InvalidParameter {
            what: "c_beta",
            requirement: "finite and non-negative",
            value: c_beta,
        });
    }
    if !(delta > 0.0) {
        return Err(AgentError::InvalidParameter {
            what: "delta",
            requirement: "in (0,1)",
            value: delta,
        });
    }
    if dim == 0 || horizon == 0 || k_budget == 0 {
        return Err(AgentError::InvalidParameter {
            what: "dimensions",
            requirement: "d, H, K_budget all positive",
            value: 0.0,
        });
    }
    let argument = k_budget as f64 * horizon as f64 / delta;
    if argument <= 1.0 {
        return Err(AgentError::NonpositiveLog { argument });
    }
    if delta >= 1.0 {
        return Err(AgentError::InvalidParameter {
            what: "delta",
            requirement: "in (0,1)",
            value: delta,
        });
    }
    let h = horizon as f64;
    Ok(c_beta * (dim as f64 * h.powi(4) * argument.ln()).sqrt())
}

/// Which covariance snapshot a bonus query refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BonusSnapshot {
    /// The covariance as it stands now.
    Current,
    /// The covariance at the end of the previous completed backward pass.
    Previous,
}

/// One sampled trajectory segment. `start_step` is 1-based: entries with
/// 0-based step index `< start_step − 1` replicate the previous path
/// (revisited prefix), and `states[start_step − 1]` is the revisited state.
/// `states` has length `H+1` (the last entry is the terminal state).
#[derive(Clone, Debug, PartialEq)]
pub struct PathBuffer {
    /// 1-based global path index `k`.
    pub path_index: u64,
    /// 1-based step the path resumed from; 1 means a fresh episode.
    pub start_step: usize,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl PathBuffer {
    /// True when this path's copied prefix matches `prev` exactly.
    pub fn prefix_matches(&self, prev: &PathBuffer) -> bool {
        let cut = self.start_step - 1;
        self.states[..=cut] == prev.states[..=cut]
            && self.actions[..cut] == prev.actions[..cut]
            && self.rewards[..cut] == prev.rewards[..cut]
    }
}

/// The newest rank-one term absorbed by a step's covariance, kept so that
/// previous-snapshot bonus queries stay answerable after the update.
#[derive(Clone, Debug)]
struct LastUpdate {
    /// Path index of the pass that applied the update.
    pass: u64,
    state: usize,
    action: usize,
    phi: Vec<f64>,
    /// Bonus at `(state, action)` computed just before the update.
    bonus: f64,
}

/// Per-step regression state of the revisiting agent.
#[derive(Clone, Debug)]
pub struct StepRegressor {
    cov: CovarianceState,
    /// u_h = Σ φ r.
    reward_sum: Vec<f64>,
    /// M_h = Σ φ_h φ_{h+1}ᵀ, row-major d×d.
    cross_sum: Vec<f64>,
    theta: Vec<f64>,
    /// θ_{h+1} as used in the most recent solve; the regression identity
    /// Λθ = u + Mθ_next is stated against this snapshot.
    theta_next_snapshot: Vec<f64>,
    index_count: u64,
    /// Path indices in I_h; populated only when tracking is enabled.
    index_set: Vec<u64>,
    /// Σ over updates of the pre-update quadratic form φᵀΛ⁻¹φ.
    potential_sum: f64,
    last_update: Option<LastUpdate>,
}

impl StepRegressor {
    fn new(dim: usize) -> Self {
        StepRegressor {
            cov: CovarianceState::new(dim),
            reward_sum: vec![0.0; dim],
            cross_sum: vec![0.0; dim * dim],
            theta: vec![0.0; dim],
            theta_next_snapshot: vec![0.0; dim],
            index_count: 0,
            index_set: Vec::new(),
            potential_sum: 0.0,
            last_update: None,
        }
    }

    /// |I_h|: how many paths have updated this step.
    pub fn index_count(&self) -> u64 {
        self.index_count
    }

    /// The explicit index set I_h; empty unless tracking was enabled.
    pub fn index_set(&self) -> &[u64] {
        &self.index_set
    }

    /// Σ of pre-update quadratic forms, for the elliptical-potential check.
    pub fn potential_sum(&self) -> f64 {
        self.potential_sum
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn covariance(&self) -> &CovarianceState {
        &self.cov
    }

    /// ‖Λ_h θ_h − (u_h + M_h θ_{h+1})‖_∞ / max(1, ‖u_h + M_h θ_{h+1}‖_∞)
    /// against the exact accumulated Λ_h and the θ_{h+1} snapshot used in
    /// the last solve. Zero for untouched steps; bounded by the maintained
    /// inverse's drift otherwise. Normalizing keeps the check meaningful
    /// when millions of updates grow ‖u_h‖ without bound.
    pub fn regression_identity_residual(&self) -> f64 {
        let d = self.cov.dim();
        let lhs = crate::linalg::mat_vec(self.cov.lambda(), &self.theta, d);
        let mut worst = 0.0_f64;
        let mut scale = 1.0_f64;
        for i in 0..d {
            let rhs = self.reward_sum[i]
                + dot(&self.cross_sum[i * d..(i + 1) * d], &self.theta_next_snapshot);
            worst = worst.max((lhs[i] - rhs).abs());
            scale = scale.max(rhs.abs());
        }
        worst / scale
    }

    /// Absorb one transition. Returns the pre-update quadratic form.
    fn apply_update(
        &mut self,
        path_index: u64,
        state: usize,
        action: usize,
        phi: &[f64],
        reward: f64,
        phi_next: Option<&[f64]>,
        theta_next: &[f64],
        bonus_pre: f64,
        track_sets: bool,
    ) -> f64 {
        let d = self.cov.dim();
        let quad_pre = self.cov.quad_form(phi).expect("feature length matches covariance");
        self.potential_sum += quad_pre;
        self.cov.rank_one_update(phi).expect("validated feature vector");
        for i in 0..d {
            self.reward_sum[i] += phi[i] * reward;
        }
        if let Some(pn) = phi_next {
            for i in 0..d {
                let row = &mut self.cross_sum[i * d..(i + 1) * d];
                for (j, m) in row.iter_mut().enumerate() {
                    *m += phi[i] * pn[j];
                }
            }
        }
        let mut rhs = self.reward_sum.clone();
        for i in 0..d {
            rhs[i] += dot(&self.cross_sum[i * d..(i + 1) * d], theta_next);
        }
        self.theta = self.cov.solve_apply(&rhs).expect("shape invariants hold");
        self.theta_next_snapshot.copy_from_slice(theta_next);
        self.index_count += 1;
        if track_sets {
            self.index_set.push(path_index);
        }
        self.last_update = Some(LastUpdate {
            pass: path_index,
            state,
            action,
            phi: phi.to_vec(),
            bonus: bonus_pre,
        });
        quad_pre
    }
}

/// Optimistic value iteration under the state-revisiting sampling protocol.
///
/// Step indices in the public API are 0-based (`0..H`); `h == H` addresses
/// the virtual terminal step whose bonus and parameters are identically
/// zero. `resume_step` and [`PathBuffer::start_step`] stay 1-based to match
/// the serialized trace format.
#[derive(Clone, Debug)]
pub struct LinQAgent {
    features: Arc<FeatureMap>,
    horizon: usize,
    beta: f64,
    /// Δ fed to the stop threshold Δ/2. May be +∞ (never revisit).
    gap_input: f64,
    regressors: Vec<StepRegressor>,
    zero_theta: Vec<f64>,
    /// Paths sampled so far (k).
    paths: u64,
    /// Episodes completed so far (n).
    episodes: u64,
    /// Path index of the most recent completed backward pass.
    last_pass_path: u64,
    /// 1-based step the next path resumes from.
    resume_step: usize,
    prev_path: Option<PathBuffer>,
    track_index_sets: bool,
}

impl LinQAgent {
    /// Agent with β from the schedule `c_β·sqrt(d·H⁴·ln(K_budget·H/δ))`.
    pub fn new(
        features: Arc<FeatureMap>,
        c_beta: f64,
        delta: f64,
        k_budget: u64,
        gap_input: f64,
    ) -> Result<Self, AgentError> {
        let beta = compute_beta(c_beta, features.dim(), features.horizon(), k_budget, delta)?;
        Self::with_beta(features, beta, gap_input)
    }

    /// Agent with an explicitly supplied β (bypasses the schedule).
    pub fn with_beta(
        features: Arc<FeatureMap>,
        beta: f64,
        gap_input: f64,
    ) -> Result<Self, AgentError> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(AgentError::InvalidParameter {
                what: "beta",
                requirement: "finite and non-negative",
                value: beta,
            });
        }
        if gap_input.is_nan() || gap_input <= 0.0 {
            return Err(AgentError::InvalidParameter {
                what: "gap_input",
                requirement: "positive (may be +inf)",
                value: gap_input,
            });
        }
        let horizon = features.horizon();
        let dim = features.dim();
        Ok(LinQAgent {
            features,
            horizon,
            beta,
            gap_input,
            regressors: (0..horizon).map(|_| StepRegressor::new(dim)).collect(),
            zero_theta: vec![0.0; dim],
            paths: 0,
            episodes: 0,
            last_pass_path: 0,
            resume_step: 1,
            prev_path: None,
            track_index_sets: false,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gap_input(&self) -> f64 {
        self.gap_input
    }

    /// Replace the gap driving the stop threshold. Under-estimating the true
    /// gap is safe (more revisits); over-estimating voids the optimism
    /// guarantee.
    pub fn set_gap_input(&mut self, gap_input: f64) {
        assert!(
            !gap_input.is_nan() && gap_input > 0.0,
            "gap_input must be positive"
        );
        self.gap_input = gap_input;
    }

    /// Record explicit index sets (memory grows with K·H).
    pub fn enable_index_tracking(&mut self) {
        self.track_index_sets = true;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn paths_sampled(&self) -> u64 {
        self.paths
    }

    pub fn episodes_completed(&self) -> u64 {
        self.episodes
    }

    /// 1-based step the next path will resume from (1 = fresh episode).
    pub fn resume_step(&self) -> usize {
        self.resume_step
    }

    pub fn regressor(&self, h: usize) -> &StepRegressor {
        &self.regressors[h]
    }

    /// |I_h| for every real step.
    pub fn index_counts(&self) -> Vec<u64> {
        self.regressors.iter().map(StepRegressor::index_count).collect()
    }

    /// Worst per-step regression-identity residual (see
    /// [`StepRegressor::regression_identity_residual`]).
    pub fn max_regression_residual(&self) -> f64 {
        self.regressors
            .iter()
            .map(StepRegressor::regression_identity_residual)
            .fold(0.0, f64::max)
    }

    /// β·sqrt(φᵀΛ_h⁻¹φ) at the requested snapshot; 0 at the virtual step
    /// `h == H`. `Previous` refers to the covariance at the end of the last
    /// completed pass: for the pair that pass updated it returns the exact
    /// cached pre-update value, for other pairs it un-applies the newest
    /// rank-one term analytically, and for steps the last pass skipped it
    /// coincides with `Current`.
    pub fn bonus(&self, h: usize, s: usize, a: usize, which: BonusSnapshot) -> f64 {
        if h == self.horizon {
            return 0.0;
        }
        let phi = self.features.features(h, s, a);
        let reg = &self.regressors[h];
        let current = || {
            let quad = reg.cov.quad_form(phi).expect("feature length matches covariance");
            self.beta * quad.sqrt()
        };
        match which {
            BonusSnapshot::Current => current(),
            BonusSnapshot::Previous => match &reg.last_update {
                Some(last) if last.pass == self.last_pass_path => {
                    if last.state == s && last.action == a {
                        last.bonus
                    } else {
                        // (Λ − φφᵀ)⁻¹ via the inverse already at hand:
                        // ψᵀΛ⁻¹ψ + (ψᵀΛ⁻¹φ)² / (1 − φᵀΛ⁻¹φ). With ‖φ‖ ≤ 1
                        // and Λ ⪰ I + φφᵀ the denominator stays ≥ 1/2.
                        let q_cur =
                            reg.cov.quad_form(phi).expect("feature length matches covariance");
                        let w = reg.cov.solve_apply(&last.phi).expect("shape invariants hold");
                        let c = dot(phi, &w);
                        let denom = 1.0 - dot(&last.phi, &w);
                        debug_assert!(denom > 0.0);
                        let q_prev = q_cur + c * c / denom;
                        self.beta * q_prev.max(0.0).sqrt()
                    }
                }
                _ => current(),
            },
        }
    }

    /// min{⟨φ_h(s,a), θ_h⟩ + b_h(s,a), H} at the current snapshot.
    pub fn q_estimate(&self, h: usize, s: usize, a: usize) -> f64 {
        let phi = self.features.features(h, s, a);
        let value = dot(phi, &self.regressors[h].theta)
            + self.bonus(h, s, a, BonusSnapshot::Current);
        value.min(self.horizon as f64)
    }

    /// Lowest-index maximizer of [`Self::q_estimate`] over actions.
    pub fn greedy_action(&self, h: usize, s: usize) -> usize {
        let mut best = 0;
        let mut best_q = self.q_estimate(h, s, 0);
        for a in 1..self.features.num_actions() {
            let q = self.q_estimate(h, s, a);
            if q > best_q {
                best_q = q;
                best = a;
            }
        }
        best
    }

    /// Sample the next path. Steps before `resume_step` replicate the
    /// previous path; from `resume_step` through `H` the agent acts
    /// greedily, receiving `r_h(s,a)` and drawing `s_{h+1}` from the
    /// transition row with exactly one 64-bit uniform per step.
    /// `initial_state` is consulted only when `resume_step == 1`.
    pub fn sample_path(
        &mut self,
        mdp: &FiniteMdp,
        initial_state: usize,
        rng: &mut impl RngCore,
    ) -> PathBuffer {
        debug_assert_eq!(mdp.horizon(), self.horizon);
        debug_assert_eq!(mdp.num_states(), self.features.num_states());
        debug_assert_eq!(mdp.num_actions(), self.features.num_actions());
        let start = self.resume_step;
        let mut states = vec![0usize; self.horizon + 1];
        let mut actions = vec![0usize; self.horizon];
        let mut rewards = vec![0.0f64; self.horizon];
        if start > 1 {
            let prev = self
                .prev_path
                .as_ref()
                .expect("resume_step > 1 implies a previous path");
            states[..start].copy_from_slice(&prev.states[..start]);
            actions[..start - 1].copy_from_slice(&prev.actions[..start - 1]);
            rewards[..start - 1].copy_from_slice(&prev.rewards[..start - 1]);
        } else {
            assert!(initial_state < mdp.num_states(), "initial state out of range");
            states[0] = initial_state;
        }
        for h in start - 1..self.horizon {
            let s = states[h];
            let a = self.greedy_action(h, s);
            actions[h] = a;
            rewards[h] = mdp.reward_at(h, s, a);
            states[h + 1] = sample_next_state(mdp, h, s, a, rng);
        }
        self.paths += 1;
        let path = PathBuffer {
            path_index: self.paths,
            start_step: start,
            states,
            actions,
            rewards,
        };
        self.prev_path = Some(path.clone());
        path
    }

    /// Backward update pass over `path`. Walks `h = H..1` (1-based),
    /// updating step `h` while the cached previous-path bonus at step `h+1`
    /// is below `gap_input/2`; the virtual terminal bonus 0 makes the `h=H`
    /// update unconditional. Returns the 1-based step it stopped at
    /// (0 = full pass, episode complete) and sets `resume_step = stop + 1`.
    pub fn backward_pass(&mut self, path: &PathBuffer) -> usize {
        assert_eq!(
            path.path_index, self.paths,
            "backward_pass consumes the path just sampled"
        );
        assert!(
            self.last_pass_path < self.paths,
            "one backward pass per path"
        );
        let threshold = 0.5 * self.gap_input;
        // b_{H+1} ≡ 0: the step-H update is unconditional.
        let mut bonus_above = 0.0_f64;
        let mut h1 = self.horizon;
        while bonus_above < threshold {
            let h = h1 - 1;
            let (s, a) = (path.states[h], path.actions[h]);
            let phi = self.features.features(h, s, a);
            // Pre-update value: this is b_h at the end of the previous
            // path, cached for the stop check one level down.
            let quad_pre = self.regressors[h]
                .cov
                .quad_form(phi)
                .expect("feature length matches covariance");
            let bonus_pre = self.beta * quad_pre.sqrt();
            let phi_next = (h1 < self.horizon)
                .then(|| self.features.features(h1, path.states[h1], path.actions[h1]));
            let (lo, hi) = self.regressors.split_at_mut(h1);
            let theta_next: &[f64] = if h1 < self.horizon {
                &hi[0].theta
            } else {
                &self.zero_theta
            };
            lo[h].apply_update(
                path.path_index,
                s,
                a,
                phi,
                path.rewards[h],
                phi_next,
                theta_next,
                bonus_pre,
                self.track_index_sets,
            );
            bonus_above = bonus_pre;
            h1 -= 1;
            if h1 == 0 {
                break;
            }
        }
        let stop = h1;
        self.last_pass_path = path.path_index;
        self.resume_step = stop + 1;
        if stop == 0 {
            self.episodes += 1;
        }
        stop
    }
}

/// Optimistic least-squares value iteration without revisiting: one full
/// trajectory per episode, full refit of every θ_h afterwards against
/// bonus-inflated bootstrapped targets over all stored episodes.
#[derive(Clone, Debug)]
pub struct BaselineAgent {
    features: Arc<FeatureMap>,
    horizon: usize,
    beta: f64,
    cov: Vec<CovarianceState>,
    theta: Vec<Vec<f64>>,
    episodes: Vec<PathBuffer>,
}

impl BaselineAgent {
    pub fn new(features: Arc<FeatureMap>, beta: f64) -> Result<Self, AgentError> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(AgentError::InvalidParameter {
                what: "beta",
                requirement: "finite and non-negative",
                value: beta,
            });
        }
        let horizon = features.horizon();
        let dim = features.dim();
        Ok(BaselineAgent {
            features,
            horizon,
            beta,
            cov: (0..horizon).map(|_| CovarianceState::new(dim)).collect(),
            theta: vec![vec![0.0; dim]; horizon],
            episodes: Vec::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn episodes_completed(&self) -> u64 {
        self.episodes.len() as u64
    }

    /// β·sqrt(φᵀΛ_h⁻¹φ); 0 at the virtual step `h == H`.
    pub fn bonus(&self, h: usize, s: usize, a: usize) -> f64 {
        if h == self.horizon {
            return 0.0;
        }
        let phi = self.features.features(h, s, a);
        let quad = self.cov[h].quad_form(phi).expect("feature length matches covariance");
        self.beta * quad.sqrt()
    }

    /// min{⟨φ_h(s,a), θ_h⟩ + b_h(s,a), H}.
    pub fn q_estimate(&self, h: usize, s: usize, a: usize) -> f64 {
        if h == self.horizon {
            return 0.0;
        }
        let phi = self.features.features(h, s, a);
        (dot(phi, &self.theta[h]) + self.bonus(h, s, a)).min(self.horizon as f64)
    }

    pub fn greedy_action(&self, h: usize, s: usize) -> usize {
        let mut best = 0;
        let mut best_q = self.q_estimate(h, s, 0);
        for a in 1..self.features.num_actions() {
            let q = self.q_estimate(h, s, a);
            if q > best_q {
                best_q = q;
                best = a;
            }
        }
        best
    }

    /// Run one greedy episode, store it, grow each Λ_h by the visited
    /// rank-one term, then refit θ_H..θ_1 against
    /// `r + max_a min{⟨φ,θ_{h+1}⟩ + b_{h+1}, H}` over all stored episodes.
    pub fn episode(
        &mut self,
        mdp: &FiniteMdp,
        initial_state: usize,
        rng: &mut impl RngCore,
    ) -> PathBuffer {
        debug_assert_eq!(mdp.horizon(), self.horizon);
        assert!(initial_state < mdp.num_states(), "initial state out of range");
        let mut states = vec![0usize; self.horizon + 1];
        let mut actions = vec![0usize; self.horizon];
        let mut rewards = vec![0.0f64; self.horizon];
        states[0] = initial_state;
        for h in 0..self.horizon {
            let s = states[h];
            let a = self.greedy_action(h, s);
            actions[h] = a;
            rewards[h] = mdp.reward_at(h, s, a);
            states[h + 1] = sample_next_state(mdp, h, s, a, rng);
        }
        let path = PathBuffer {
            path_index: self.episodes.len() as u64 + 1,
            start_step: 1,
            states,
            actions,
            rewards,
        };
        for h in 0..self.horizon {
            let phi = self.features.features(h, path.states[h], path.actions[h]);
            self.cov[h].rank_one_update(phi).expect("validated feature vector");
        }
        self.episodes.push(path.clone());
        self.refit();
        path
    }

    fn refit(&mut self) {
        let d = self.features.dim();
        for h in (0..self.horizon).rev() {
            let mut rhs = vec![0.0; d];
            for episode in &self.episodes {
                let phi = self.features.features(h, episode.states[h], episode.actions[h]);
                let next = episode.states[h + 1];
                let value_next = if h + 1 == self.horizon {
                    0.0
                } else {
                    (0..self.features.num_actions())
                        .map(|a| self.q_estimate(h + 1, next, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                let target = episode.rewards[h] + value_next;
                for i in 0..d {
                    rhs[i] += phi[i] * target;
                }
            }
            self.theta[h] = self.cov[h].solve_apply(&rhs).expect("shape invariants hold");
        }
    }

    #[cfg(test)]
    fn theta_at(&self, h: usize) -> &[f64] {
        &self.theta[h]
    }
}
