//! Static model data for a finite-state hidden Markov model observed in
//! white noise, together with the algebraic operators used everywhere else:
//! the pairing `μ(f)`, the Hadamard product and the carré du champ `Γ`.
//!
//! Conventions: `A(x, j)` for `x ≠ j` is the jump rate from `x` to `j`, and
//! `A` acts on functions (column vectors) as `(A f)(x) = Σ_j A(x, j) f(j)`.
//! Densities and filters evolve under the transpose. States are 0-indexed
//! internally and 1-indexed in every user-facing message.

use std::ops::Deref;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// Absolute tolerance for generator row sums and simplex normalization.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    d: usize,
}

impl StateSpace {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!(
                "state space needs at least 2 states, got {d}"
            )));
        }
        Ok(Self { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

/// A real-valued function on the state space, one value per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Function(Vec<f64>);

impl Function {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "function value at state {} is not finite",
                i + 1
            )));
        }
        Ok(Self(values))
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self(vec![c; d])
    }

    pub fn ones(d: usize) -> Self {
        Self::constant(d, 1.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self + c·1`
    pub fn shifted(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v + c).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Deref for Function {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Function> for Vec<f64> {
    fn from(f: Function) -> Self {
        f.0
    }
}

/// A probability vector on the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "probability weight at state {} is {w}, must be finite and >= 0",
                    i + 1
                )));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!(
                "probability weights sum to {total}, not 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    /// Point mass at the 0-indexed state `x`.
    pub fn point_mass(d: usize, x: usize) -> Self {
        let mut w = vec![0.0; d];
        w[x] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Generator of a continuous-time Markov chain, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl RateMatrix {
    /// Builds a generator from row-major entries. Off-diagonal entries must
    /// be nonnegative and each row must sum to zero.
    pub fn from_row_major(d: usize, entries: Vec<f64>) -> Result<Self> {
        check_dim("rate matrix entries", d * d, entries.len())?;
        for i in 0..d {
            let row = &entries[i * d..(i + 1) * d];
            for (j, &a) in row.iter().enumerate() {
                if !a.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "rate matrix entry A({},{}) is not finite",
                        i + 1,
                        j + 1
                    )));
                }
                if i != j && a < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "rate matrix entry A({},{}) = {a} is negative off the diagonal",
                        i + 1,
                        j + 1
                    )));
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!(
                    "rate matrix row {} sums to {sum}, not 0",
                    i + 1
                )));
            }
        }
        Ok(Self { d, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let mut entries = Vec::with_capacity(d * d);
        for row in rows {
            check_dim("rate matrix row", d, row.len())?;
            entries.extend_from_slice(row);
        }
        Self::from_row_major(d, entries)
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            entries: vec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.d + to]
    }

    /// Total jump intensity `−A(x,x)` out of state `x`.
    #[inline]
    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.rate(x, x)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.entries[x * self.d..(x + 1) * self.d]
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.d).map(|x| self.exit_rate(x)).fold(0.0, f64::max)
    }

    /// `out = A f`
    #[inline]
    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.d);
        for (x, o) in out.iter_mut().enumerate() {
            *o = self.row(x).iter().zip(f).map(|(a, v)| a * v).sum();
        }
    }

    /// `out = Aᵀ ρ`
    #[inline]
    pub fn apply_transpose_into(&self, rho: &[f64], out: &mut [f64]) {
        debug_assert_eq!(rho.len(), self.d);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (x, &r) in rho.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(x)) {
                *o += r * a;
            }
        }
    }

    pub fn apply(&self, f: &Function) -> Result<Function> {
        check_dim("generator argument", self.d, f.len())?;
        let mut out = vec![0.0; self.d];
        self.apply_into(f, &mut out);
        Ok(Function(out))
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.entries)
    }

    /// Transition matrix `exp(A t)`; entry `(x, j)` is `P(X_t = j | X_0 = x)`.
    pub fn transition_matrix(&self, t: f64) -> DMatrix<f64> {
        (self.to_dmatrix() * t).exp()
    }
}

/// Model parameters: generator, observation function, prior and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub space: StateSpace,
    pub rates: RateMatrix,
    pub h: Function,
    pub prior: ProbVector,
    pub horizon: f64,
}

impl Model {
    pub fn new(rates: RateMatrix, h: Function, prior: ProbVector, horizon: f64) -> Result<Self> {
        let space = StateSpace::new(rates.dim())?;
        check_dim("observation function", space.dim(), h.len())?;
        check_dim("prior", space.dim(), prior.len())?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        Ok(Self {
            space,
            rates,
            h,
            prior,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Law of `X_t`: `exp(Aᵀ t) μ`.
    pub fn marginal(&self, t: f64) -> Vec<f64> {
        let p = self.rates.transition_matrix(t);
        let d = self.dim();
        (0..d)
            .map(|j| (0..d).map(|x| self.prior[x] * p[(x, j)]).sum())
            .collect()
    }

    /// Largest time step satisfying `dt ≤ 0.01 / max(‖h‖∞², max_x |A(x,x)|)`.
    pub fn recommended_dt(&self) -> f64 {
        let scale = self.h.max_abs().powi(2).max(self.rates.max_exit_rate());
        if scale == 0.0 {
            f64::INFINITY
        } else {
            0.01 / scale
        }
    }
}

/// `Γ(f)(x) = Σ_j A(x,j) (f(x) − f(j))²`
pub fn carre_du_champ(a: &RateMatrix, f: &[f64]) -> Result<Function> {
    check_dim("carre du champ argument", a.dim(), f.len())?;
    let mut out = vec![0.0; a.dim()];
    carre_du_champ_into(a, f, &mut out);
    Ok(Function(out))
}

#[inline]
pub(crate) fn carre_du_champ_into(a: &RateMatrix, f: &[f64], out: &mut [f64]) {
    for (x, o) in out.iter_mut().enumerate() {
        let fx = f[x];
        *o = a
            .row(x)
            .iter()
            .zip(f)
            .enumerate()
            .filter(|(j, _)| *j != x)
            .map(|(_, (r, fj))| r * (fx - fj) * (fx - fj))
            .sum();
    }
}

/// `μ(f) = Σ_x μ(x) f(x)`; `weights` may be an unnormalized nonnegative vector.
pub fn pair(weights: &[f64], f: &[f64]) -> Result<f64> {
    check_dim("pairing", weights.len(), f.len())?;
    Ok(dot(weights, f))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Element-wise product `(f g)(x) = f(x) g(x)`.
pub fn hadamard(f: &[f64], g: &[f64]) -> Result<Function> {
    check_dim("hadamard product", f.len(), g.len())?;
    Ok(Function(f.iter().zip(g).map(|(a, b)| a * b).collect()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_state() -> RateMatrix {
        RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap()
    }

    #[test]
    fn gamma_of_constant_vanishes() {
        let a = RateMatrix::from_rows(&[
            vec![-2.0, 1.0, 1.0],
            vec![1.0, -3.0, 2.0],
            vec![2.0, 2.0, -4.0],
        ])
        .unwrap();
        let g = carre_du_champ(&a, &Function::constant(3, 4.2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_two_state_hand_values() {
        let a = two_state();
        let g = carre_du_champ(&a, &[0.0, 1.0]).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
        let g = carre_du_champ(&a, &[0.0, 2.0]).unwrap();
        assert_eq!(g.as_slice(), &[4.0, 8.0]);
    }

    #[test]
    fn gamma_dimension_mismatch() {
        assert!(matches!(
            carre_du_champ(&two_state(), &[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pair_examples() {
        assert_eq!(pair(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(pair(&[1.0, 0.0, 0.0], &[7.0, -3.0, 2.0]).unwrap(), 7.0);
        assert_abs_diff_eq!(pair(&[0.25, 0.75], &[2.0, -2.0]).unwrap(), -1.0);
        assert!(pair(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn hadamard_examples() {
        let f = [0.3, -1.2, 5.0];
        assert_eq!(hadamard(&f, &[1.0; 3]).unwrap().as_slice(), &f);
        assert_eq!(
            hadamard(&[0.0, 1.0], &[2.0, 3.0]).unwrap().as_slice(),
            &[0.0, 3.0]
        );
        assert!(hadamard(&f, &f).unwrap().iter().all(|&v| v >= 0.0));
        assert!(hadamard(&f, &[1.0]).is_err());
    }

    #[test]
    fn rate_matrix_validation_names_entry() {
        let err = RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![-0.5, 0.5]]).unwrap_err();
        assert!(err.to_string().contains("A(2,1)"), "{err}");
        let err = RateMatrix::from_rows(&[vec![-1.0, 2.0], vec![1.0, -1.0]]).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.1, -0.1]).is_err());
        assert!(ProbVector::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn state_space_needs_two_states() {
        assert!(StateSpace::new(1).is_err());
        assert!(StateSpace::new(2).is_ok());
    }

    #[test]
    fn model_dimension_checks() {
        let a = two_state();
        let h = Function::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(Model::new(a.clone(), h, ProbVector::uniform(2), 1.0).is_err());
        let h = Function::new(vec![0.0, 1.0]).unwrap();
        assert!(Model::new(a.clone(), h.clone(), ProbVector::uniform(2), 0.0).is_err());
        assert!(Model::new(a, h, ProbVector::uniform(2), 1.0).is_ok());
    }

    #[test]
    fn transition_matrix_converges_to_stationary() {
        let p = two_state().transition_matrix(50.0);
        assert_abs_diff_eq!(p[(0, 0)], 2.0 / 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(p[(1, 0)], 2.0 / 3.0, epsilon = 1e-10);
    }

    pub(crate) fn arb_generator(max_d: usize) -> impl Strategy<Value = RateMatrix> {
        (2..=max_d).prop_flat_map(|d| {
            prop::collection::vec(0.0..5.0f64, d * d).prop_map(move |mut e| {
                for i in 0..d {
                    e[i * d + i] = 0.0;
                    let s: f64 = e[i * d..(i + 1) * d].iter().sum();
                    e[i * d + i] = -s;
                }
                RateMatrix::from_row_major(d, e).unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gamma_nonnegative(a in arb_generator(5), seed in prop::collection::vec(-10.0..10.0f64, 5)) {
            let f = &seed[..a.dim()];
            let g = carre_du_champ(&a, f).unwrap();
            prop_assert!(g.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn gamma_shift_and_scale(a in arb_generator(5),
                                 seed in prop::collection::vec(-10.0..10.0f64, 5),
                                 c in -5.0..5.0f64) {
            let f = Function::new(seed[..a.dim()].to_vec()).unwrap();
            let g = carre_du_champ(&a, &f).unwrap();
            let g_shift = carre_du_champ(&a, &f.shifted(c)).unwrap();
            let g_scale = carre_du_champ(&a, &f.scaled(c)).unwrap();
            for x in 0..a.dim() {
                let tol = 1e-9 * (1.0 + g[x].abs());
                prop_assert!((g_shift[x] - g[x]).abs() <= tol);
                prop_assert!((g_scale[x] - c * c * g[x]).abs() <= tol * (1.0 + c * c));
            }
        }

        #[test]
        fn pair_is_bilinear(w1 in prop::collection::vec(0.0..1.0f64, 4),
                            w2 in prop::collection::vec(0.0..1.0f64, 4),
                            f in prop::collection::vec(-3.0..3.0f64, 4),
                            g in prop::collection::vec(-3.0..3.0f64, 4),
                            a in -2.0..2.0f64, b in -2.0..2.0f64) {
            let wc: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let fc: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let lhs = pair(&wc, &f).unwrap();
            let rhs = a * pair(&w1, &f).unwrap() + b * pair(&w2, &f).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            let lhs = pair(&w1, &fc).unwrap();
            let rhs = a * pair(&w1, &f).unwrap() + b * pair(&w1, &g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
