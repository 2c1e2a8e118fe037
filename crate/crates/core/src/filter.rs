//! Forward filtering along an observation path.
//!
//! The unnormalized filter `ρ` solves the linear Zakai equation
//! `dρ = Aᵀρ dt + diag(h) ρ dZ`, so that `σ_t(f) = ⟨ρ_t, f⟩`. It is stored in
//! scaled form: after every step `ρ` is renormalized to the simplex, giving
//! the normalized filter `π_t`, while the removed mass is accumulated in
//! `log σ_t(1)`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{dot, Model};
use crate::pathsim::{Ensemble, Measure, TimeGrid};
use crate::stats::{fit_line, MeanEstimate, Moments};

/// Time-stepping scheme for the Zakai equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZakaiScheme {
    /// `ρ' = ρ + Aᵀρ dt + Hρ ΔZ`
    EulerMaruyama,
    /// Euler–Maruyama plus the diagonal-noise correction `½H²ρ(ΔZ² − dt)`.
    Milstein,
    /// `ρ' = exp(Aᵀdt) (exp(HΔZ − ½H²dt) ρ)`: the exact filter of the chain
    /// sampled on the grid with left-point observation drift.
    #[default]
    Splitting,
}

/// Filter trajectories along one observation path.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPath {
    d: usize,
    pi: Vec<f64>,
    log_mass: Vec<f64>,
    /// Number of entries clamped to zero after leaving the positive cone.
    pub clamp_events: usize,
}

impl FilterPath {
    /// Single-point filter path holding the prior.
    pub fn initial(prior: &[f64]) -> Self {
        Self {
            d: prior.len(),
            pi: prior.to_vec(),
            log_mass: vec![0.0],
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.log_mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_mass.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Normalized filter `π_{t_k}`.
    #[inline]
    pub fn pi(&self, k: usize) -> &[f64] {
        &self.pi[k * self.d..(k + 1) * self.d]
    }

    #[inline]
    pub fn log_mass(&self, k: usize) -> f64 {
        self.log_mass[k]
    }

    /// Total unnormalized mass `σ_{t_k}(1)`.
    #[inline]
    pub fn mass(&self, k: usize) -> f64 {
        self.log_mass[k].exp()
    }

    /// Unnormalized filter vector `σ_{t_k} = σ_{t_k}(1) π_{t_k}`.
    pub fn sigma(&self, k: usize) -> Vec<f64> {
        let m = self.mass(k);
        self.pi(k).iter().map(|p| m * p).collect()
    }

    /// `σ_{t_k}(f)`
    #[inline]
    pub fn sigma_pair(&self, k: usize, f: &[f64]) -> f64 {
        self.mass(k) * dot(self.pi(k), f)
    }
}

/// Runs the scaled Zakai recursion with the default scheme.
pub fn run_zakai(model: &Model, z: &[f64], grid: &TimeGrid) -> Result<FilterPath> {
    run_zakai_with(model, z, grid, ZakaiScheme::default())
}

pub fn run_zakai_with(
    model: &Model,
    z: &[f64],
    grid: &TimeGrid,
    scheme: ZakaiScheme,
) -> Result<FilterPath> {
    check_dim("observation path", grid.len(), z.len())?;
    let d = model.dim();
    let dt = grid.dt();
    let n = grid.n_steps();
    let mut pi = Vec::with_capacity((n + 1) * d);
    let mut log_mass = Vec::with_capacity(n + 1);
    pi.extend_from_slice(&model.prior);
    log_mass.push(0.0);

    let transition = match scheme {
        ZakaiScheme::Splitting => Some(model.rates.transition_matrix(dt)),
        _ => None,
    };
    let mut rho = model.prior.to_vec();
    let mut work = vec![0.0; d];
    let mut clamp_events = 0;
    let mut lm = 0.0;
    for k in 0..n {
        let dz = z[k + 1] - z[k];
        if let Some(p) = &transition {
            for x in 0..d {
                let h = model.h[x];
                work[x] = rho[x] * (h * dz - 0.5 * h * h * dt).exp();
            }
            for j in 0..d {
                rho[j] = (0..d).map(|x| p[(x, j)] * work[x]).sum();
            }
        } else {
            let ito = match scheme {
                ZakaiScheme::Milstein => 0.5 * (dz * dz - dt),
                _ => 0.0,
            };
            model.rates.apply_transpose_into(&rho, &mut work);
            for x in 0..d {
                let h = model.h[x];
                rho[x] += work[x] * dt + h * rho[x] * dz + h * h * rho[x] * ito;
            }
        }
        let mut mass = 0.0;
        for r in rho.iter_mut() {
            if *r < 0.0 {
                *r = 0.0;
                clamp_events += 1;
            }
            mass += *r;
        }
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::NumericalFailure {
                step: k,
                quantity: format!("unnormalized filter mass {mass}"),
            });
        }
        rho.iter_mut().for_each(|r| *r /= mass);
        lm += mass.ln();
        pi.extend_from_slice(&rho);
        log_mass.push(lm);
    }
    Ok(FilterPath {
        d,
        pi,
        log_mass,
        clamp_events,
    })
}

/// Runs the filter along every path of an ensemble.
pub fn run_filters(model: &Model, ensemble: &Ensemble) -> Result<Vec<FilterPath>> {
    run_filters_with(model, ensemble, ZakaiScheme::default())
}

pub fn run_filters_with(
    model: &Model,
    ensemble: &Ensemble,
    scheme: ZakaiScheme,
) -> Result<Vec<FilterPath>> {
    ensemble
        .paths
        .par_iter()
        .map(|p| run_zakai_with(model, &p.z, &ensemble.grid, scheme))
        .collect()
}

/// Mean-square errors of competing estimators of `f(X_T)` on a `P` ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorComparison {
    /// `E|f(X_T) − π_T(f)|²`
    pub filter: MeanEstimate,
    /// `E|f(X_T) − E f(X_T)|²` with the prior-propagated mean.
    pub prior_mean: MeanEstimate,
    /// `E|f(X_T) − (a + b Z_T)|²` with `(a, b)` fitted on the ensemble.
    pub linear_in_z: MeanEstimate,
}

impl EstimatorComparison {
    pub fn filter_is_best(&self) -> bool {
        self.filter.mean <= self.prior_mean.mean && self.filter.mean <= self.linear_in_z.mean
    }
}

/// Compares the filter with two simpler estimators of `f(X_T)`.
pub fn minimum_variance_witness(
    model: &Model,
    ensemble: &Ensemble,
    filters: &[FilterPath],
    f: &[f64],
) -> Result<EstimatorComparison> {
    if ensemble.measure != Measure::P {
        return Err(Error::InvalidArgument(
            "estimator comparison requires an ensemble simulated under P".into(),
        ));
    }
    check_dim("filter paths", ensemble.len(), filters.len())?;
    check_dim("test function", model.dim(), f.len())?;
    let n = ensemble.grid.n_steps();
    let prior_mean = dot(&model.marginal(ensemble.grid.horizon()), f);
    let target: Vec<f64> = ensemble.paths.iter().map(|p| f[p.state(n)]).collect();
    let zt: Vec<f64> = ensemble.paths.iter().map(|p| p.z[n]).collect();
    let line = fit_line(&zt, &target);
    let (mut fm, mut pm, mut lm) = (Moments::default(), Moments::default(), Moments::default());
    for i in 0..ensemble.len() {
        let y = target[i];
        fm.push((y - dot(filters[i].pi(n), f)).powi(2));
        pm.push((y - prior_mean).powi(2));
        lm.push((y - line.intercept - line.slope * zt[i]).powi(2));
    }
    Ok(EstimatorComparison {
        filter: fm.estimate(),
        prior_mean: pm.estimate(),
        linear_in_z: lm.estimate(),
    })
}

/// `π_{t_k}(f)`
pub fn estimate_conditional_moment(fp: &FilterPath, f: &[f64], k: usize) -> Result<f64> {
    check_dim("conditional moment argument", fp.dim(), f.len())?;
    if k >= fp.len() {
        return Err(Error::InvalidArgument(format!(
            "grid index {k} out of range (path has {} points)",
            fp.len()
        )));
    }
    Ok(dot(fp.pi(k), f))
}

/// `max_k |σ_t(f) − σ_t(1) π_t(f)| / σ_t(1)`, with `σ_t(f)` computed from the
/// reconstructed unnormalized vector.
pub fn consistency_check(fp: &FilterPath, f: &[f64]) -> f64 {
    (0..fp.len())
        .map(|k| {
            let mass = fp.mass(k);
            let sigma_f = dot(&fp.sigma(k), f);
            (sigma_f - mass * dot(fp.pi(k), f)).abs() / mass
        })
        .fold(0.0, f64::max)
}

/// One Euler step of the nonlinear (Wonham) filter under `P̃`:
/// `dπ = Aᵀπ dt + (H − π(h)) π (dZ − π(h) dt)`. Diagnostic only.
pub fn wonham_increment(model: &Model, pi: &[f64], dz: f64, dt: f64) -> Vec<f64> {
    let d = model.dim();
    let mut drift = vec![0.0; d];
    model.rates.apply_transpose_into(pi, &mut drift);
    let pih = dot(pi, &model.h);
    let innovation = dz - pih * dt;
    (0..d)
        .map(|x| drift[x] * dt + (model.h[x] - pih) * pi[x] * innovation)
        .collect()
}

/// Writes `path_id,k,t,log_mass,pi_1..pi_d` for the first `max_paths` paths.
pub fn write_filter_csv<W: Write>(
    out: &mut W,
    filters: &[FilterPath],
    grid: &TimeGrid,
    max_paths: usize,
) -> Result<()> {
    let d = filters.first().map_or(0, |f| f.dim());
    write!(out, "path_id,k,t,log_mass")?;
    for x in 1..=d {
        write!(out, ",pi_{x}")?;
    }
    writeln!(out)?;
    for (i, fp) in filters.iter().take(max_paths).enumerate() {
        for k in 0..fp.len() {
            write!(out, "{i},{k},{},{}", grid.t(k), fp.log_mass(k))?;
            for p in fp.pi(k) {
                write!(out, ",{p}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Function, ProbVector, RateMatrix};
    use crate::pathsim::Measure;
    use approx::assert_abs_diff_eq;

    fn two_state(h: Vec<f64>, prior: Vec<f64>, horizon: f64) -> Model {
        let a = RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        Model::new(
            a,
            Function::new(h).unwrap(),
            ProbVector::new(prior).unwrap(),
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn single_euler_step_by_hand() {
        let model = two_state(vec![1.0, 0.0], vec![1.0, 0.0], 0.01);
        let grid = TimeGrid::new(0.01, 1).unwrap();
        for scheme in [ZakaiScheme::EulerMaruyama, ZakaiScheme::Milstein] {
            let fp = run_zakai_with(&model, &[0.0, 0.1], &grid, scheme).unwrap();
            // ρ' = (1.09, 0.01); ΔZ² = dt makes the Milstein correction vanish
            assert_abs_diff_eq!(fp.mass(1), 1.10, epsilon = 1e-12);
            assert_abs_diff_eq!(fp.sigma(1)[0], 1.09, epsilon = 1e-12);
            assert_abs_diff_eq!(fp.sigma(1)[1], 0.01, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_observation_reduces_to_forward_equation() {
        let model = two_state(vec![0.0, 0.0], vec![1.0, 0.0], 1.0);
        let n = 200;
        let grid = TimeGrid::new(1.0, n).unwrap();
        // closed form for the two-state chain: π₁(t) = 2/3 + (1/3) e^{−3t}
        let exact = 2.0 / 3.0 + (-3.0f64).exp() / 3.0;
        for scheme in [
            ZakaiScheme::EulerMaruyama,
            ZakaiScheme::Milstein,
            ZakaiScheme::Splitting,
        ] {
            let fp = run_zakai_with(&model, &vec![0.0; n + 1], &grid, scheme).unwrap();
            let rel = (fp.pi(n)[0] - exact).abs() / exact;
            assert!(rel <= 5.0 * grid.dt(), "{scheme:?}: relative error {rel}");
            assert_abs_diff_eq!(fp.mass(n), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn static_chain_matches_likelihood_ratio() {
        let model = Model::new(
            RateMatrix::zeros(2),
            Function::new(vec![0.0, 1.0]).unwrap(),
            ProbVector::uniform(2),
            1.0,
        )
        .unwrap();
        let n = 200;
        let grid = TimeGrid::new(1.0, n).unwrap();
        for i in 0..20 {
            let path = crate::pathsim::simulate_path(&model, &grid, 8, i, Measure::P).unwrap();
            for (scheme, tol) in [
                (ZakaiScheme::Milstein, 5.0 * grid.dt()),
                (ZakaiScheme::Splitting, 1e-10),
            ] {
                let fp = run_zakai_with(&model, &path.z, &grid, scheme).unwrap();
                for k in [n / 2, n] {
                    let ratio = fp.pi(k)[0] / fp.pi(k)[1];
                    let exact = (-path.z[k] + grid.t(k) / 2.0).exp();
                    let rel = (ratio - exact).abs() / exact;
                    assert!(rel <= tol, "{scheme:?} path {i} k {k}: rel {rel}");
                }
            }
        }
    }

    #[test]
    fn conditional_moment_examples() {
        let fp = FilterPath::initial(&[0.3, 0.7]);
        assert_abs_diff_eq!(
            estimate_conditional_moment(&fp, &[1.0, 1.0], 0).unwrap(),
            1.0
        );
        assert_abs_diff_eq!(
            estimate_conditional_moment(&fp, &[1.0, -1.0], 0).unwrap(),
            -0.4
        );
        assert!(estimate_conditional_moment(&fp, &[1.0, -1.0], 1).is_err());
        assert!(estimate_conditional_moment(&fp, &[1.0], 0).is_err());
    }

    #[test]
    fn consistency_holds_by_construction() {
        let model = two_state(vec![2.0, -1.0], vec![0.5, 0.5], 1.0);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let path = crate::pathsim::simulate_path(&model, &grid, 1, 0, Measure::PTilde).unwrap();
        let fp = run_zakai(&model, &path.z, &grid).unwrap();
        assert!(consistency_check(&fp, &[1.0, 1.0]) <= 1e-14);
        assert!(consistency_check(&fp, &[0.37, -2.5]) <= 1e-12);
        assert_eq!(
            consistency_check(&FilterPath::initial(&[0.5, 0.5]), &[3.0, 1.0]),
            0.0
        );
        for k in 0..fp.len() {
            assert_abs_diff_eq!(fp.pi(k).iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            assert!(fp.pi(k).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn wonham_step_tracks_normalized_zakai_step() {
        let model = two_state(vec![1.0, -1.0], vec![0.4, 0.6], 1.0);
        let dt = 1e-4;
        let dz = 0.004;
        let grid = TimeGrid::new(dt, 1).unwrap();
        let fp = run_zakai_with(&model, &[0.0, dz], &grid, ZakaiScheme::EulerMaruyama).unwrap();
        let inc = wonham_increment(&model, &[0.4, 0.6], dz, dt);
        for x in 0..2 {
            let zakai_inc = fp.pi(1)[x] - fp.pi(0)[x];
            assert!(
                (zakai_inc - inc[x]).abs() < 5.0 * dz * dz,
                "{zakai_inc} vs {}",
                inc[x]
            );
        }
    }

    #[test]
    fn underflow_is_reported_with_step() {
        let model = two_state(vec![1.0, 1.0], vec![0.5, 0.5], 1.0);
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let err = run_zakai_with(&model, &[0.0, 0.0, -5.0], &grid, ZakaiScheme::EulerMaruyama)
            .unwrap_err();
        assert!(
            matches!(err, Error::NumericalFailure { step: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn filter_beats_naive_estimators() {
        let model = two_state(vec![1.5, -1.5], vec![0.5, 0.5], 1.0);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let ens = Ensemble::generate(&model, grid, 4000, 3, Measure::P).unwrap();
        let filters = run_filters(&model, &ens).unwrap();
        let cmp = minimum_variance_witness(&model, &ens, &filters, &[1.0, 0.0]).unwrap();
        assert!(cmp.filter_is_best(), "{cmp:?}");
        let ptilde = Ensemble::generate(&model, grid, 10, 3, Measure::PTilde).unwrap();
        assert!(minimum_variance_witness(&model, &ptilde, &filters[..10], &[1.0, 0.0]).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]

        #[test]
        fn filter_stays_on_simplex(
            a in crate::model::tests::arb_generator(4),
            h in proptest::collection::vec(-3.0..3.0f64, 4),
            w in proptest::collection::vec(0.01..1.0f64, 4),
            dz in proptest::collection::vec(-0.5..0.5f64, 20),
        ) {
            let d = a.dim();
            let total: f64 = w[..d].iter().sum();
            let prior = ProbVector::new(w[..d].iter().map(|x| x / total).collect()).unwrap();
            let model = Model::new(a, Function::new(h[..d].to_vec()).unwrap(), prior, 1.0).unwrap();
            let grid = TimeGrid::new(1.0, dz.len()).unwrap();
            let mut z = vec![0.0];
            for step in &dz {
                z.push(z.last().unwrap() + step);
            }
            for scheme in [ZakaiScheme::EulerMaruyama, ZakaiScheme::Milstein, ZakaiScheme::Splitting] {
                // explicit steps may lose all mass on large increments, which is reported
                let fp = match run_zakai_with(&model, &z, &grid, scheme) {
                    Ok(fp) => fp,
                    Err(Error::NumericalFailure { .. }) if scheme != ZakaiScheme::Splitting => continue,
                    Err(e) => panic!("{scheme:?}: {e}"),
                };
                for k in 0..fp.len() {
                    let pi = fp.pi(k);
                    proptest::prop_assert!(pi.iter().all(|&p| p >= 0.0));
                    proptest::prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
