//! Dense linear algebra for d-dimensional ridge-regression state.
//!
//! The central type is [`CovarianceState`], which maintains Λ = I + Σᵢ φᵢφᵢᵀ
//! together with its inverse. Rank-one updates keep Λ⁻¹ current via
//! Sherman–Morrison in O(d²); every `refactor_period` updates the inverse is
//! rebuilt from Λ by a direct Cholesky factorization so that floating-point
//! drift stays bounded (‖ΛΛ⁻¹ − I‖_max ≤ 1e−8 at all times).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix not positive definite: pivot {pivot:e} at column {col}")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
}

/// Default number of rank-one updates between direct re-factorizations.
/// Amortizes the O(d³) rebuild below the O(d²) update cost while keeping
/// Sherman–Morrison drift far under the 1e−8 budget.
pub const DEFAULT_REFACTOR_PERIOD: u64 = 256;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y = M·x for row-major d×d M.
pub fn mat_vec(m: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    debug_assert_eq!(m.len(), d * d);
    debug_assert_eq!(x.len(), d);
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], x)).collect()
}

fn check_finite(v: &[f64], context: &'static str) -> Result<(), LinalgError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite { context })
    }
}

/// Covariance matrix Λ = I + Σ φφᵀ with a maintained inverse.
#[derive(Clone, Debug)]
pub struct CovarianceState {
    dim: usize,
    /// Λ, row-major d×d. Symmetric, eigenvalues ≥ 1.
    lambda: Vec<f64>,
    /// Λ⁻¹, kept in lockstep with `lambda`.
    lambda_inv: Vec<f64>,
    update_count: u64,
    refactor_period: u64,
}

impl CovarianceState {
    pub fn new(dim: usize) -> Self {
        Self::with_refactor_period(dim, DEFAULT_REFACTOR_PERIOD)
    }

    pub fn with_refactor_period(dim: usize, refactor_period: u64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        assert!(refactor_period > 0, "refactor period must be positive");
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        CovarianceState {
            dim,
            lambda: eye.clone(),
            lambda_inv: eye,
            update_count: 0,
            refactor_period,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn lambda_inv(&self) -> &[f64] {
        &self.lambda_inv
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), LinalgError> {
        if v.len() == self.dim {
            Ok(())
        } else {
            Err(LinalgError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            })
        }
    }

    /// Λ ← Λ + φφᵀ; Λ⁻¹ ← Λ⁻¹ − (Λ⁻¹φ)(Λ⁻¹φ)ᵀ / (1 + φᵀΛ⁻¹φ).
    ///
    /// A zero φ leaves the state fully unchanged, including `update_count`.
    pub fn rank_one_update(&mut self, phi: &[f64]) -> Result<(), LinalgError> {
        self.check_dim(phi)?;
        check_finite(phi, "rank-one update vector")?;
        if phi.iter().all(|&x| x == 0.0) {
            return Ok(());
        }
        let d = self.dim;
        let v = mat_vec(&self.lambda_inv, phi, d);
        // denom ≥ 1 because Λ⁻¹ ≻ 0; no division hazard.
        let denom = 1.0 + dot(phi, &v);
        for i in 0..d {
            for j in 0..d {
                self.lambda[i * d + j] += phi[i] * phi[j];
                self.lambda_inv[i * d + j] -= v[i] * v[j] / denom;
            }
        }
        self.update_count += 1;
        if self.update_count % self.refactor_period == 0 {
            self.refactor()?;
        }
        Ok(())
    }

    /// Rebuild Λ⁻¹ from Λ by Cholesky factorization. Called automatically
    /// every `refactor_period` updates; exposed for forced refreshes.
    pub fn refactor(&mut self) -> Result<(), LinalgError> {
        self.lambda_inv = cholesky_inverse(&self.lambda, self.dim)?;
        Ok(())
    }

    /// φᵀΛ⁻¹φ, clamped at zero against rounding. Always ≤ ‖φ‖₂² since the
    /// eigenvalues of Λ never drop below 1.
    pub fn quad_form(&self, phi: &[f64]) -> Result<f64, LinalgError> {
        self.check_dim(phi)?;
        let v = mat_vec(&self.lambda_inv, phi, self.dim);
        Ok(dot(phi, &v).max(0.0))
    }

    /// Λ⁻¹·rhs.
    pub fn solve_apply(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.check_dim(rhs)?;
        Ok(mat_vec(&self.lambda_inv, rhs, self.dim))
    }

    /// ‖ΛΛ⁻¹ − I‖_max, a health probe for the maintained inverse.
    pub fn inverse_drift(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += self.lambda[i * d + k] * self.lambda_inv[k * d + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }
}

/// Cholesky factorization A = LLᵀ of a symmetric matrix, lower triangle
/// returned row-major. Fails when a pivot falls at or below a relative
/// threshold, signalling loss of positive definiteness.
pub fn cholesky_factor(a: &[f64], d: usize) -> Result<Vec<f64>, LinalgError> {
    debug_assert_eq!(a.len(), d * d);
    check_finite(a, "cholesky input")?;
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(1.0f64, f64::max);
    let tol = 1e-12 * scale;
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > tol) {
            return Err(LinalgError::NotPositiveDefinite { col: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut acc = a[i * d + j];
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = acc / ljj;
        }
    }
    Ok(l)
}

/// Solve A·x = rhs for symmetric positive definite A via Cholesky.
pub fn cholesky_solve(a: &[f64], d: usize, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let l = cholesky_factor(a, d)?;
    Ok(solve_with_factor(&l, d, rhs))
}

fn solve_with_factor(l: &[f64], d: usize, rhs: &[f64]) -> Vec<f64> {
    // forward: L·y = rhs
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = rhs[i];
        for k in 0..i {
            acc -= l[i * d + k] * y[k];
        }
        y[i] = acc / l[i * d + i];
    }
    // backward: Lᵀ·x = y
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut acc = y[i];
        for k in (i + 1)..d {
            acc -= l[k * d + i] * x[k];
        }
        x[i] = acc / l[i * d + i];
    }
    x
}

/// Direct inverse of a symmetric positive definite matrix, symmetrized.
pub fn cholesky_inverse(a: &[f64], d: usize) -> Result<Vec<f64>, LinalgError> {
    let l = cholesky_factor(a, d)?;
    let mut inv = vec![0.0; d * d];
    let mut unit = vec![0.0; d];
    for col in 0..d {
        unit[col] = 1.0;
        let x = solve_with_factor(&l, d, &unit);
        unit[col] = 0.0;
        for row in 0..d {
            inv[row * d + col] = x[row];
        }
    }
    // analytic inverse is symmetric; average out round-off asymmetry
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (inv[i * d + j] + inv[j * d + i]);
            inv[i * d + j] = m;
            inv[j * d + i] = m;
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::RngCore;
    use rand_xoshiro::rand_core::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn unit_f64(rng: &mut impl RngCore) -> f64 {
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn random_unit_vec(rng: &mut impl RngCore, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| unit_f64(rng) * 2.0 - 1.0).collect();
            let n = norm2(&v);
            if n > 1e-3 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    #[test]
    fn rank_one_on_identity() {
        let mut st = CovarianceState::new(2);
        st.rank_one_update(&[1.0, 0.0]).unwrap();
        assert_eq!(st.lambda(), &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(st.lambda_inv(), &[0.5, 0.0, 0.0, 1.0]);
        assert_eq!(st.update_count(), 1);
    }

    #[test]
    fn zero_vector_is_a_no_op() {
        let mut st = CovarianceState::new(3);
        st.rank_one_update(&[0.5, 0.0, 0.5]).unwrap();
        let snapshot = st.clone();
        st.rank_one_update(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(st.lambda(), snapshot.lambda());
        assert_eq!(st.lambda_inv(), snapshot.lambda_inv());
        assert_eq!(st.update_count(), snapshot.update_count());
    }

    #[test]
    fn second_update_matches_direct_2x2_inverse() {
        // Λ = diag(2,1), add (1,0) again: Λ' = diag(3,1), Λ'⁻¹ = diag(1/3,1).
        let mut st = CovarianceState::new(2);
        st.rank_one_update(&[1.0, 0.0]).unwrap();
        st.rank_one_update(&[1.0, 0.0]).unwrap();
        let inv = st.lambda_inv();
        assert!((inv[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(inv[1], 0.0);
        assert_eq!(inv[2], 0.0);
        assert_eq!(inv[3], 1.0);
    }

    #[test]
    fn quad_form_identity_and_after_update() {
        let mut st = CovarianceState::new(2);
        assert!((st.quad_form(&[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(st.quad_form(&[0.0, 0.0]).unwrap(), 0.0);
        st.rank_one_update(&[1.0, 0.0]).unwrap();
        assert!((st.quad_form(&[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn solve_apply_examples() {
        let mut st = CovarianceState::new(2);
        assert_eq!(st.solve_apply(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
        st.rank_one_update(&[1.0, 0.0]).unwrap();
        let x = st.solve_apply(&[0.6, 0.0]).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-15);
        assert_eq!(x[1], 0.0);
        assert_eq!(st.solve_apply(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut st = CovarianceState::new(2);
        assert_eq!(
            st.rank_one_update(&[1.0]),
            Err(LinalgError::DimensionMismatch { expected: 2, got: 1 })
        );
        assert!(st.quad_form(&[1.0, 2.0, 3.0]).is_err());
        assert!(st.solve_apply(&[]).is_err());
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, −1
        match cholesky_inverse(&a, 2) {
            Err(LinalgError::NotPositiveDefinite { col: 1, .. }) => {}
            other => panic!("expected positive-definiteness failure, got {other:?}"),
        }
    }

    #[test]
    fn ten_thousand_updates_stay_within_drift_budget() {
        // Acceptance-scale oracle: maintained inverse vs one-shot factorization.
        for d in [1usize, 2, 4, 8] {
            let mut rng = Xoshiro256StarStar::seed_from_u64(0xD1F7 + d as u64);
            let mut st = CovarianceState::new(d);
            for _ in 0..10_000 {
                st.rank_one_update(&random_unit_vec(&mut rng, d)).unwrap();
            }
            let direct = cholesky_inverse(st.lambda(), d).unwrap();
            let worst = st
                .lambda_inv()
                .iter()
                .zip(&direct)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst <= 1e-8, "d={d}: drift {worst:e} exceeds 1e-8");
            assert!(st.inverse_drift() <= 1e-8);
        }
    }

    #[test]
    fn elliptical_potential_bound_holds_deterministically() {
        // Σᵢ φᵢᵀ(Λ^{i−1})⁻¹φᵢ ≤ 2d·ln(k/d + 1) for any unit-norm sequence.
        for d in [1usize, 2, 4, 8] {
            let mut rng = Xoshiro256StarStar::seed_from_u64(0xE11 + d as u64);
            let mut st = CovarianceState::new(d);
            let mut potential = 0.0;
            let k = 5_000u64;
            for _ in 0..k {
                let phi = random_unit_vec(&mut rng, d);
                potential += st.quad_form(&phi).unwrap();
                st.rank_one_update(&phi).unwrap();
            }
            let bound = 2.0 * d as f64 * (k as f64 / d as f64 + 1.0).ln();
            assert!(
                potential <= bound,
                "d={d}: potential {potential} exceeds {bound}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quad_form_never_increases_under_updates(
            seed in any::<u64>(),
            d in 1usize..6,
            updates in 1usize..40,
        ) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let query = random_unit_vec(&mut rng, d);
            let mut st = CovarianceState::new(d);
            let mut last = st.quad_form(&query).unwrap();
            prop_assert!(last <= 1.0 + 1e-12);
            for _ in 0..updates {
                st.rank_one_update(&random_unit_vec(&mut rng, d)).unwrap();
                let q = st.quad_form(&query).unwrap();
                prop_assert!(q <= last + 1e-12, "quad_form increased: {q} > {last}");
                last = q;
            }
        }

        #[test]
        fn drift_stays_small_under_random_updates(
            seed in any::<u64>(),
            d in 1usize..9,
            updates in 1usize..1500,
        ) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let mut st = CovarianceState::new(d);
            for _ in 0..updates {
                // scale ≤ 1 keeps the ‖φ‖ ≤ 1 contract
                let scale = unit_f64(&mut rng);
                let phi: Vec<f64> = random_unit_vec(&mut rng, d)
                    .iter()
                    .map(|x| x * scale)
                    .collect();
                st.rank_one_update(&phi).unwrap();
            }
            prop_assert!(st.inverse_drift() <= 1e-8);
        }

        #[test]
        fn quad_form_bounded_by_squared_norm(
            seed in any::<u64>(),
            d in 1usize..6,
            updates in 0usize..30,
        ) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let mut st = CovarianceState::new(d);
            for _ in 0..updates {
                st.rank_one_update(&random_unit_vec(&mut rng, d)).unwrap();
            }
            let query = random_unit_vec(&mut rng, d);
            let q = st.quad_form(&query).unwrap();
            prop_assert!(q >= 0.0);
            prop_assert!(q <= dot(&query, &query) + 1e-12);
        }
    }
}
