//! Dual optimal control: cost, Lagrangian, value process and the
//! statistical checks of duality, martingale optimality and the drift
//! identity.
//!
//! All expectations are Monte Carlo averages over a `P̃` ensemble (the
//! observation is Brownian), weighted by `D_t` where a `P` expectation is
//! wanted. Every verdict is statistical at 3 standard errors.

use std::io::Write;

use crate::bsde::{optimal_control_unchecked, BsdeSolution, SProcess, SolvedBsde};
use crate::error::{check_dim, Error, Result};
use crate::filter::FilterPath;
use crate::model::{carre_du_champ_into, dot, Function, Model};
use crate::pathsim::{Ensemble, Measure, SamplePath, TimeGrid};
use crate::stats::{chunked_reduce, fit_line, LineFit, MeanEstimate, Moments};

/// Number of standard errors used by every verdict.
pub const Z_SCORE: f64 = 3.0;

/// `l = ½σ(Γ(y)) + ½σ((u + v)²)`.
pub fn lagrangian(sigma: &[f64], y: &[f64], v: &[f64], u: f64, model: &Model) -> Result<f64> {
    let d = model.dim();
    check_dim("unnormalized filter", d, sigma.len())?;
    check_dim("dual value", d, y.len())?;
    check_dim("dual martingale coefficient", d, v.len())?;
    if let Some(x) = sigma.iter().position(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "unnormalized filter entry {} is {}",
            x + 1,
            sigma[x]
        )));
    }
    let mut gamma = vec![0.0; d];
    Ok(lagrangian_unchecked(sigma, y, v, u, model, &mut gamma))
}

#[inline]
fn lagrangian_unchecked(
    sigma: &[f64],
    y: &[f64],
    v: &[f64],
    u: f64,
    model: &Model,
    gamma: &mut [f64],
) -> f64 {
    carre_du_champ_into(&model.rates, y, gamma);
    let mut acc = 0.0;
    for x in 0..sigma.len() {
        acc += sigma[x] * (gamma[x] + (u + v[x]).powi(2));
    }
    0.5 * acc
}

/// `U* = −(π(hY) − π(h)π(Y)) − π(V)`.
pub fn optimal_control(pi: &[f64], y: &[f64], v: &[f64], h: &[f64]) -> Result<f64> {
    let d = pi.len();
    check_dim("dual value", d, y.len())?;
    check_dim("dual martingale coefficient", d, v.len())?;
    check_dim("observation function", d, h.len())?;
    Ok(optimal_control_unchecked(pi, y, v, h))
}

/// Model, `P̃` ensemble and its filter paths.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a Model,
    pub ensemble: &'a Ensemble,
    pub filters: &'a [FilterPath],
    pub quadrature: Quadrature,
}

/// Rule for the `dt` integrals of the Lagrangian and of the drift gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// `Σ f(t_k) dt`
    LeftPoint,
    /// `Σ ½(f(t_k) + f(t_{k+1})) dt`
    #[default]
    Trapezoid,
}

impl<'a> Problem<'a> {
    pub fn new(
        model: &'a Model,
        ensemble: &'a Ensemble,
        filters: &'a [FilterPath],
    ) -> Result<Self> {
        check_dim("filter paths", ensemble.len(), filters.len())?;
        if let Some(fp) = filters.first() {
            check_dim("filter grid points", ensemble.grid.len(), fp.len())?;
            check_dim("filter dimension", model.dim(), fp.dim())?;
        }
        if ensemble.is_empty() {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        Ok(Self {
            model,
            ensemble,
            filters,
            quadrature: Quadrature::default(),
        })
    }

    pub fn with_quadrature(self, quadrature: Quadrature) -> Self {
        Self { quadrature, ..self }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.ensemble.grid
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.is_empty()
    }

    fn require_ptilde(&self, what: &str) -> Result<()> {
        if self.ensemble.measure != Measure::PTilde {
            return Err(Error::InvalidArgument(format!(
                "{what} requires an ensemble simulated under P-tilde"
            )));
        }
        Ok(())
    }
}

/// Pathwise quantities along one path for one solved dual equation.
#[derive(Debug, Clone)]
struct PathEval {
    /// `∫_{t_k}^{t_{k+1}} l dt`, `k < n`.
    l_inc: Vec<f64>,
    /// `M_{t_k} = ½(σ(Y²) − σ(Y)π(Y)) − ∫_0^{t_k} l dt`.
    m: Vec<f64>,
    /// `∫_{t_k}^{t_{k+1}} ½σ(1)(U − U*)² dt`, `k < n`.
    gap_inc: Vec<f64>,
    /// dZ coefficient of `M`: `½σ(1)[π(h(Y−π(Y))²) + 2Cov_π(Y, V)]`, `k < n`.
    g: Vec<f64>,
    /// `½D_k(Y_k(X_k) − S_k)²`.
    head: Vec<f64>,
    /// `½(Y_0(X_0) − μ(Y_0))²`.
    initial: f64,
}

impl PathEval {
    fn running_from(&self, k: usize) -> f64 {
        self.l_inc[k..].iter().sum::<f64>()
    }

    fn total_cost(&self) -> f64 {
        self.initial + self.running_from(0)
    }

    fn total_gap(&self) -> f64 {
        self.gap_inc.iter().sum::<f64>()
    }
}

fn integrate(values: &[f64], dt: f64, rule: Quadrature) -> Vec<f64> {
    match rule {
        Quadrature::LeftPoint => values[..values.len() - 1].iter().map(|v| v * dt).collect(),
        Quadrature::Trapezoid => values
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]) * dt)
            .collect(),
    }
}

fn evaluate_path(
    model: &Model,
    grid: &TimeGrid,
    path: &SamplePath,
    fp: &FilterPath,
    sol: &BsdeSolution,
    rule: Quadrature,
) -> PathEval {
    let d = model.dim();
    let n = grid.n_steps();
    let dt = grid.dt();
    let h = model.h.as_slice();
    let s = s_values(model, sol, path);

    let mut gamma = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    let mut l = Vec::with_capacity(n + 1);
    let mut value = Vec::with_capacity(n + 1);
    let mut gap_rate = Vec::with_capacity(n + 1);
    let mut g = Vec::with_capacity(n + 1);
    let mut head = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let pi = fp.pi(k);
        let mass = fp.mass(k);
        let (y, v) = (sol.y(k), sol.v(k));
        let py = dot(pi, y);
        let var = pi
            .iter()
            .zip(y)
            .map(|(p, yy)| p * (yy - py).powi(2))
            .sum::<f64>();
        value.push(0.5 * mass * var);
        let x = path.state(k);
        head.push(0.5 * path.d(k) * (y[x] - s[k]).powi(2));
        let u = sol.u(k);
        for (sg, p) in sigma.iter_mut().zip(pi) {
            *sg = mass * p;
        }
        l.push(lagrangian_unchecked(&sigma, y, v, u, model, &mut gamma));
        let u_star = optimal_control_unchecked(pi, y, v, h);
        gap_rate.push(0.5 * mass * (u - u_star).powi(2));
        let pv = dot(pi, v);
        let (mut hv, mut cov) = (0.0, 0.0);
        for xx in 0..d {
            hv += pi[xx] * h[xx] * (y[xx] - py).powi(2);
            cov += pi[xx] * (y[xx] - py) * (v[xx] - pv);
        }
        g.push(0.5 * mass * (hv + 2.0 * cov));
    }
    g.pop();
    let l_inc = integrate(&l, dt, rule);
    let gap_inc = integrate(&gap_rate, dt, rule);
    let mut acc = 0.0;
    let mut m = Vec::with_capacity(n + 1);
    for k in 0..=n {
        m.push(value[k] - acc);
        if k < n {
            acc += l_inc[k];
        }
    }
    let y0 = sol.y(0);
    let mu_y0 = dot(&model.prior, y0);
    PathEval {
        l_inc,
        m,
        gap_inc,
        g,
        head,
        initial: 0.5 * (y0[path.state(0)] - mu_y0).powi(2),
    }
}

fn s_values(model: &Model, sol: &BsdeSolution, path: &SamplePath) -> Vec<f64> {
    crate::bsde::s_process(sol.y(0), &model.prior, sol.controls(), &path.z)
        .map(|SProcess { s }| s)
        .expect("solution and path share the grid")
}

/// Runs `fold(acc, path_eval, i)` over all paths, chunk-deterministically.
fn reduce_paths<F>(
    problem: &Problem<'_>,
    solved: &SolvedBsde,
    width: usize,
    fold: F,
) -> Vec<Moments>
where
    F: Fn(&mut [Moments], &PathEval, usize) + Sync,
{
    let grid = problem.grid();
    chunked_reduce(
        problem.len(),
        || vec![Moments::default(); width],
        |acc: &mut Vec<Moments>, i| {
            let path = &problem.ensemble.paths[i];
            let fp = &problem.filters[i];
            let sol = solved.path(problem.model, fp, &path.z);
            let eval = evaluate_path(problem.model, grid, path, fp, &sol, problem.quadrature);
            fold(acc, &eval, i);
        },
    )
}

/// Monte Carlo estimate of `J(U) = Ẽ[½|Y_0(X_0) − μ(Y_0)|² + ∫ l dt]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub initial_term: MeanEstimate,
    pub running_term: MeanEstimate,
    pub total: MeanEstimate,
}

impl CostBreakdown {
    pub fn std_error(&self) -> f64 {
        self.total.se
    }
}

impl std::fmt::Display for CostBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "J = {} (initial {}, running {})",
            self.total, self.initial_term, self.running_term
        )
    }
}

pub fn cost(problem: &Problem<'_>, solved: &SolvedBsde) -> Result<CostBreakdown> {
    problem.require_ptilde("cost")?;
    let m = reduce_paths(problem, solved, 3, |acc, e, _| {
        let run = e.running_from(0);
        acc[0].push(e.initial);
        acc[1].push(run);
        acc[2].push(e.initial + run);
    });
    Ok(CostBreakdown {
        initial_term: m[0].estimate(),
        running_term: m[1].estimate(),
        total: m[2].estimate(),
    })
}

/// `|LHS − RHS|` with the standard error of the difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub lhs: MeanEstimate,
    pub rhs: MeanEstimate,
    /// Difference `lhs − rhs` with its (paired or independent) standard error.
    pub difference: MeanEstimate,
    /// Absolute allowance added to `3·SE`.
    pub slack: f64,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.difference.within(0.0, Z_SCORE, self.slack)
    }

    /// `|difference| / SE`
    pub fn z(&self) -> f64 {
        if self.difference.se > 0.0 {
            self.difference.mean.abs() / self.difference.se
        } else if self.difference.mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "lhs = {}, rhs = {}, diff = {} ({:.2} SE, slack {:.2e}) {}",
            self.lhs,
            self.rhs,
            self.difference,
            self.z(),
            self.slack,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub cost: CostBreakdown,
    /// `(k, J(U) vs Ẽ[½D_k|Y_k(X_k) − S_k|² + ∫_{t_k}^T l])` per checkpoint.
    pub cost_to_go: Vec<(usize, Comparison)>,
    /// `J(U)` vs `½E|F(X_T) − S_T|²` on an independent `P` ensemble, if given.
    pub plain_terminal: Option<Comparison>,
    /// `½Ẽ[D_T|F − S_T|²]` vs `½E|F − S_T|²`, if a `P` ensemble is given.
    pub terminal_forms: Option<Comparison>,
    pub n_paths: usize,
    pub dt: f64,
}

impl DualityReport {
    pub fn passed(&self) -> bool {
        self.cost_to_go.iter().all(|(_, c)| c.passed())
            && self.plain_terminal.is_none_or(|c| c.passed())
            && self.terminal_forms.is_none_or(|c| c.passed())
    }

    /// The checkpoint comparison at `t = T`.
    pub fn terminal(&self) -> Option<&Comparison> {
        self.cost_to_go.last().map(|(_, c)| c)
    }
}

/// Checks `J(U) = Ẽ[½D_t|Y_t(X_t) − S_t|² + ∫_t^T l dτ]` at the checkpoints
/// (paired differences on the `P̃` paths) and, when `physical` is given, the
/// plain terminal form `½E|F(X_T) − S_T|²` on those `P` paths.
///
/// `slack` is the absolute discretization allowance added to `3·SE`.
pub fn check_duality(
    problem: &Problem<'_>,
    solved: &SolvedBsde,
    checkpoints: &[usize],
    physical: Option<&Problem<'_>>,
    slack: f64,
) -> Result<DualityReport> {
    problem.require_ptilde("duality check")?;
    let grid = *problem.grid();
    let dt = grid.dt();
    let n = grid.n_steps();
    if let Some(&k) = checkpoints.iter().find(|&&k| k > n) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {k} beyond grid end {n}"
        )));
    }
    let c = checkpoints.len();
    // layout: [J, R_k (c), J − R_k (c), ½D_T|F − S_T|²]
    let m = reduce_paths(problem, solved, 2 + 2 * c, |acc, e, _| {
        let j = e.total_cost();
        acc[0].push(j);
        acc[1 + 2 * c].push(e.head[n]);
        for (q, &k) in checkpoints.iter().enumerate() {
            let r = e.head[k] + e.running_from(k);
            acc[1 + q].push(r);
            acc[1 + c + q].push(j - r);
        }
    });
    let cost_est = cost(problem, solved)?;
    let cost_to_go = checkpoints
        .iter()
        .enumerate()
        .map(|(q, &k)| {
            (
                k,
                Comparison {
                    lhs: m[0].estimate(),
                    rhs: m[1 + q].estimate(),
                    difference: m[1 + c + q].estimate(),
                    slack,
                },
            )
        })
        .collect();

    let (plain_terminal, terminal_forms) = match physical {
        None => (None, None),
        Some(pp) => {
            if pp.ensemble.measure != Measure::P {
                return Err(Error::InvalidArgument(
                    "plain terminal form requires an ensemble simulated under P".into(),
                ));
            }
            check_dim("physical grid points", grid.len(), pp.grid().len())?;
            let mp = reduce_paths(pp, solved, 1, |acc, e, i| {
                // head carries D_T; undo it for the plain form
                let d_t = pp.ensemble.paths[i].d(n);
                acc[0].push(e.head[n] / d_t);
            });
            let plain = mp[0].estimate();
            let weighted = m[1 + 2 * c].estimate();
            (
                Some(Comparison {
                    lhs: m[0].estimate(),
                    rhs: plain,
                    difference: m[0].estimate().minus_independent(&plain),
                    slack,
                }),
                Some(Comparison {
                    lhs: weighted,
                    rhs: plain,
                    difference: weighted.minus_independent(&plain),
                    slack,
                }),
            )
        }
    };
    Ok(DualityReport {
        cost: cost_est,
        cost_to_go,
        plain_terminal,
        terminal_forms,
        n_paths: problem.len(),
        dt,
    })
}

/// What `ζ` to evaluate the value function at.
#[derive(Clone, Copy)]
pub enum Zeta<'a> {
    Fixed(&'a Function),
    /// `ζ` depending on the path index (must be `𝒵_{t}`-measurable).
    PerPath(&'a (dyn Fn(usize) -> Function + Sync)),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub k: usize,
    /// `½Ẽ[D_t|ζ(X_t) − π_t(ζ)|²]`
    pub direct: MeanEstimate,
    /// `½Ẽ[σ_t(ζ²) − σ_t(ζ)π_t(ζ)]`
    pub filter_form: MeanEstimate,
    /// Paired `direct − filter_form`.
    pub difference: MeanEstimate,
}

impl ValueEstimate {
    pub fn agree(&self) -> bool {
        self.difference.within(0.0, Z_SCORE, 0.0)
    }
}

/// The conditional-variance value function `𝒱_t(ζ)` at grid index `k`, by
/// two estimators.
pub fn value_function(problem: &Problem<'_>, zeta: Zeta<'_>, k: usize) -> Result<ValueEstimate> {
    problem.require_ptilde("value function")?;
    let n = problem.grid().n_steps();
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "time index {k} beyond grid end {n}"
        )));
    }
    if let Zeta::Fixed(f) = zeta {
        check_dim("zeta", problem.model.dim(), f.len())?;
    }
    let d = problem.model.dim();
    let m = chunked_reduce(
        problem.len(),
        || vec![Moments::default(); 3],
        |acc: &mut Vec<Moments>, i| {
            let owned;
            let z: &[f64] = match zeta {
                Zeta::Fixed(f) => f,
                Zeta::PerPath(rule) => {
                    owned = rule(i);
                    assert_eq!(owned.len(), d, "zeta dimension");
                    &owned
                }
            };
            let path = &problem.ensemble.paths[i];
            let fp = &problem.filters[i];
            let pi = fp.pi(k);
            let pz = dot(pi, z);
            let direct = 0.5 * path.d(k) * (z[path.state(k)] - pz).powi(2);
            let var: f64 = pi.iter().zip(z).map(|(p, zz)| p * (zz - pz).powi(2)).sum();
            let filt = 0.5 * fp.mass(k) * var;
            acc[0].push(direct);
            acc[1].push(filt);
            acc[2].push(direct - filt);
        },
    );
    Ok(ValueEstimate {
        k,
        direct: m[0].estimate(),
        filter_form: m[1].estimate(),
        difference: m[2].estimate(),
    })
}

/// Cross-path trace of the value process `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleTrace {
    pub t: Vec<f64>,
    pub m_mean: Vec<f64>,
    pub m_se: Vec<f64>,
    /// `(E[M_{t_{k+1}}] − E[M_{t_k}]) / dt`, `k < n`.
    pub drift_estimate: Vec<f64>,
    /// `−Ẽ[½σ(1)(U − U*)²]`, `k < n`.
    pub drift_predicted: Vec<f64>,
    pub checkpoints: Vec<usize>,
    /// `M_{t_c} − M_0` per checkpoint (paired).
    pub increments: Vec<MeanEstimate>,
    /// `M_{t_b} − M_{t_a}` for every checkpoint pair `a < b` (paired).
    pub pair_increments: Vec<((usize, usize), MeanEstimate)>,
    /// `Ẽ∫½σ(1)(U − U*)² dt`: the predicted `E[M_0] − E[M_T]`.
    pub predicted_gap: MeanEstimate,
    pub n_paths: usize,
    pub dt: f64,
}

impl MartingaleTrace {
    /// Mean trace non-increasing within `3·SE` between every checkpoint pair.
    pub fn is_supermartingale(&self) -> bool {
        self.pair_increments
            .iter()
            .all(|(_, inc)| inc.mean <= Z_SCORE * inc.se)
    }

    /// Mean trace constant within `3·SE` at every checkpoint.
    pub fn is_martingale(&self) -> bool {
        self.increments
            .iter()
            .all(|inc| inc.within(0.0, Z_SCORE, 0.0))
    }

    /// `E[M_T] − E[M_0]`
    pub fn total_increment(&self) -> MeanEstimate {
        *self.increments.last().expect("at least one checkpoint")
    }

    /// Largest `|E[M_t] − E[M_0]|` over checkpoints, with its SE.
    pub fn max_deviation(&self) -> MeanEstimate {
        self.increments
            .iter()
            .copied()
            .max_by(|a, b| a.mean.abs().total_cmp(&b.mean.abs()))
            .expect("at least one checkpoint")
    }

    /// Writes `k,t,m_mean,m_se,drift_pred,drift_obs`; the drift columns are
    /// empty on the last row.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "k,t,m_mean,m_se,drift_pred,drift_obs")?;
        for k in 0..self.t.len() {
            write!(out, "{k},{},{},{}", self.t[k], self.m_mean[k], self.m_se[k])?;
            if k < self.drift_estimate.len() {
                writeln!(
                    out,
                    ",{},{}",
                    self.drift_predicted[k], self.drift_estimate[k]
                )?;
            } else {
                writeln!(out, ",,")?;
            }
        }
        Ok(())
    }
}

/// Cross-path mean of `M_t = ½(σ_t(Y_t²) − σ_t(Y_t)π_t(Y_t)) − ∫_0^t l dτ`
/// with paired checkpoint increments.
pub fn check_martingale(problem: &Problem<'_>, solved: &SolvedBsde) -> Result<MartingaleTrace> {
    problem.require_ptilde("martingale check")?;
    let grid = *problem.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let cps = grid.quarter_checkpoints();
    let pairs: Vec<(usize, usize)> = (0..cps.len())
        .flat_map(|a| (a + 1..cps.len()).map(move |b| (a, b)))
        .collect();
    // layout: [M_k (n+1), gap rate (n), M_c − M_0 (c), pairs (p), ∫gap]
    let (o_gap, o_inc) = (n + 1, 2 * n + 1);
    let o_pair = o_inc + cps.len();
    let o_int = o_pair + pairs.len();
    let m = reduce_paths(problem, solved, o_int + 1, |acc, e, _| {
        for k in 0..=n {
            acc[k].push(e.m[k]);
        }
        for k in 0..n {
            acc[o_gap + k].push(e.gap_inc[k] / dt);
        }
        for (q, &k) in cps.iter().enumerate() {
            acc[o_inc + q].push(e.m[k] - e.m[0]);
        }
        for (q, &(a, b)) in pairs.iter().enumerate() {
            acc[o_pair + q].push(e.m[cps[b]] - e.m[cps[a]]);
        }
        acc[o_int].push(e.total_gap());
    });
    let m_mean: Vec<f64> = m[..=n].iter().map(|s| s.mean).collect();
    Ok(MartingaleTrace {
        t: (0..=n).map(|k| grid.t(k)).collect(),
        m_se: m[..=n].iter().map(|s| s.estimate().se).collect(),
        drift_estimate: m_mean.windows(2).map(|w| (w[1] - w[0]) / dt).collect(),
        drift_predicted: m[o_gap..o_gap + n].iter().map(|s| -s.mean).collect(),
        m_mean,
        increments: m[o_inc..o_pair].iter().map(Moments::estimate).collect(),
        pair_increments: pairs
            .iter()
            .enumerate()
            .map(|(q, &(a, b))| ((cps[a], cps[b]), m[o_pair + q].estimate()))
            .collect(),
        checkpoints: cps,
        predicted_gap: m[o_int].estimate(),
        n_paths: problem.len(),
        dt,
    })
}

/// Regression of observed value-process increments on the predicted drift
/// `−½σ(1)(U − U*)² dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// Per-step cross-path means of `ΔM_k` against the per-step means of the
    /// prediction, fitted over `k`.
    pub aggregated: LineFit,
    /// Same, with the martingale part `G_k ΔZ_k` subtracted pathwise.
    pub aggregated_compensated: LineFit,
    /// Path-by-path pooled fit of compensated increments on the prediction.
    pub pooled: LineFit,
    /// `Σ_k Ẽ[ΔM_k]` vs `Σ_k Ẽ[pred_k]`; the difference is the integrated
    /// discretization bias.
    pub integrated: Comparison,
    pub t: Vec<f64>,
    pub predicted: Vec<f64>,
    pub observed: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
}

impl DriftReport {
    pub fn slope_in(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.aggregated.slope)
    }

    pub fn intercept_ok(&self) -> bool {
        self.aggregated.intercept.abs() <= Z_SCORE * self.aggregated.intercept_se
    }

    /// `|slope − 1|`
    pub fn slope_bias(&self) -> f64 {
        (self.aggregated.slope - 1.0).abs()
    }

    pub fn passed(&self) -> bool {
        self.slope_in(0.9, 1.1) && self.aggregated.r_squared >= 0.8 && self.intercept_ok()
    }

    /// Writes `k,t,drift_pred,drift_obs` (per-step means divided by `dt`).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "k,t,drift_pred,drift_obs")?;
        for k in 0..self.predicted.len() {
            writeln!(
                out,
                "{k},{},{},{}",
                self.t[k],
                self.predicted[k] / self.dt,
                self.observed[k] / self.dt
            )?;
        }
        Ok(())
    }
}

/// Verifies `dM = −½σ(1)(U − U*)² dt + G dZ` for a deterministic control and
/// terminal value, where the exact solution has `V ≡ 0`.
pub fn check_drift_identity(problem: &Problem<'_>, solved: &SolvedBsde) -> Result<DriftReport> {
    problem.require_ptilde("drift check")?;
    if !matches!(solved, SolvedBsde::Ode(_)) {
        return Err(Error::InvalidArgument(
            "drift check needs the exact solution of a deterministic control and terminal value"
                .into(),
        ));
    }
    let grid = *problem.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    // layout: [pred_k (n), ΔM_k (n), ΔM_k − GΔZ (n), ΣΔM, Σpred, ΣΔM − Σpred]
    // plus pooled moments [x, y, xx, xy, yy]
    let o_pool = 3 * n + 3;
    let m = reduce_paths(problem, solved, o_pool + 5, |acc, e, i| {
        let path = &problem.ensemble.paths[i];
        let (mut sm, mut sp) = (0.0, 0.0);
        for k in 0..n {
            let pred = -e.gap_inc[k];
            let dm = e.m[k + 1] - e.m[k];
            let comp = dm - e.g[k] * path.dz(k);
            acc[k].push(pred);
            acc[n + k].push(dm);
            acc[2 * n + k].push(comp);
            acc[o_pool].push(pred);
            acc[o_pool + 1].push(comp);
            acc[o_pool + 2].push(pred * pred);
            acc[o_pool + 3].push(pred * comp);
            acc[o_pool + 4].push(comp * comp);
            sm += dm;
            sp += pred;
        }
        acc[3 * n].push(sm);
        acc[3 * n + 1].push(sp);
        acc[3 * n + 2].push(sm - sp);
    });
    let means = |r: std::ops::Range<usize>| -> Vec<f64> { m[r].iter().map(|s| s.mean).collect() };
    let predicted = means(0..n);
    let observed = means(n..2 * n);
    let compensated = means(2 * n..3 * n);
    Ok(DriftReport {
        aggregated: fit_line(&predicted, &observed),
        aggregated_compensated: fit_line(&predicted, &compensated),
        pooled: pooled_fit(&m[o_pool..o_pool + 5]),
        integrated: Comparison {
            lhs: m[3 * n].estimate(),
            rhs: m[3 * n + 1].estimate(),
            difference: m[3 * n + 2].estimate(),
            slack: 0.0,
        },
        t: (0..n).map(|k| grid.t(k)).collect(),
        predicted,
        observed,
        n_paths: problem.len(),
        dt,
    })
}

fn pooled_fit(s: &[Moments]) -> LineFit {
    let nn = s[0].n as f64;
    let (mx, my) = (s[0].mean, s[1].mean);
    let sxx = (s[2].mean - mx * mx) * nn;
    let sxy = (s[3].mean - mx * my) * nn;
    let syy = (s[4].mean - my * my) * nn;
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sse = (syy - slope * sxy).max(0.0);
    let s2 = sse / (nn - 2.0).max(1.0);
    LineFit {
        slope,
        intercept: my - slope * mx,
        slope_se: if sxx > 0.0 {
            (s2 / sxx).sqrt()
        } else {
            f64::INFINITY
        },
        intercept_se: (s2 * (1.0 / nn + mx * mx / sxx)).sqrt(),
        r_squared: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
        n: s[0].n as usize,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub label: String,
    pub cost: CostBreakdown,
    /// `J(U) − benchmark`, paired.
    pub excess: MeanEstimate,
    /// `Ẽ∫½σ(1)(U − U*)² dt`
    pub predicted_gap: MeanEstimate,
    pub is_optimal: bool,
}

impl CandidateResult {
    /// Excess matches the predicted gap within `3·joint SE`.
    pub fn gap_matches(&self) -> bool {
        let se = self.excess.se.hypot(self.predicted_gap.se);
        (self.excess.mean - self.predicted_gap.mean).abs() <= Z_SCORE * se
    }

    /// Excess strictly positive beyond `3·SE`.
    pub fn exceeds(&self) -> bool {
        self.excess.mean > Z_SCORE * self.excess.se
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalCostReport {
    /// `½E|F(X_T) − π_T(F)|²` in filter form `½Ẽ[σ_T(F²) − σ_T(F)π_T(F)]`.
    pub benchmark: MeanEstimate,
    /// The same quantity by the direct `D_T`-weighted estimator.
    pub benchmark_direct: MeanEstimate,
    pub candidates: Vec<CandidateResult>,
}

impl OptimalCostReport {
    /// The optimal candidate attains the benchmark within `3·SE`; every other
    /// candidate exceeds it beyond `3·SE`.
    pub fn passed(&self) -> bool {
        self.candidates.iter().all(|c| {
            if c.is_optimal {
                c.excess.within(0.0, Z_SCORE, 0.0)
            } else {
                c.exceeds()
            }
        })
    }
}

/// Estimates `J(U)` per candidate against the optimal cost
/// `½E|F(X_T) − π_T(F)|²`. Candidates are `(label, solution, is_optimal)`.
pub fn check_optimal_cost(
    problem: &Problem<'_>,
    terminal: &Function,
    candidates: &[(String, &SolvedBsde, bool)],
) -> Result<OptimalCostReport> {
    problem.require_ptilde("optimal cost check")?;
    check_dim("terminal condition", problem.model.dim(), terminal.len())?;
    let n = problem.grid().n_steps();
    let bench = value_function(problem, Zeta::Fixed(terminal), n)?;
    let f = terminal.as_slice();
    let mut out = Vec::with_capacity(candidates.len());
    for (label, solved, is_optimal) in candidates {
        let m = reduce_paths(problem, solved, 5, |acc, e, i| {
            let fp = &problem.filters[i];
            let pi = fp.pi(n);
            let pf = dot(pi, f);
            let var: f64 = pi.iter().zip(f).map(|(p, v)| p * (v - pf).powi(2)).sum();
            let b = 0.5 * fp.mass(n) * var;
            let run = e.running_from(0);
            let j = e.initial + run;
            acc[0].push(e.initial);
            acc[1].push(run);
            acc[2].push(j);
            acc[3].push(j - b);
            acc[4].push(e.total_gap());
        });
        out.push(CandidateResult {
            label: label.clone(),
            cost: CostBreakdown {
                initial_term: m[0].estimate(),
                running_term: m[1].estimate(),
                total: m[2].estimate(),
            },
            excess: m[3].estimate(),
            predicted_gap: m[4].estimate(),
            is_optimal: *is_optimal,
        });
    }
    Ok(OptimalCostReport {
        benchmark: bench.filter_form,
        benchmark_direct: bench.direct,
        candidates: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProbVector, RateMatrix};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_state() -> Model {
        Model::new(
            RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap(),
            Function::new(vec![0.0, 1.0]).unwrap(),
            ProbVector::uniform(2),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn lagrangian_hand_value() {
        let l = lagrangian(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], 1.0, &two_state()).unwrap();
        assert_relative_eq!(l, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn lagrangian_vanishes_for_constant_y_and_cancelling_v() {
        let u = 0.7;
        let l = lagrangian(&[0.3, 0.9], &[2.0, 2.0], &[-u, -u], u, &two_state()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn lagrangian_rejects_bad_input() {
        let m = two_state();
        assert!(matches!(
            lagrangian(&[1.0], &[0.0, 1.0], &[0.0, 0.0], 0.0, &m),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(lagrangian(&[-1.0, 1.0], &[0.0, 1.0], &[0.0, 0.0], 0.0, &m).is_err());
    }

    #[test]
    fn optimal_control_hand_value() {
        let u = optimal_control(&[0.5, 0.5], &[0.0, 1.0], &[0.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_relative_eq!(u, -0.25, epsilon = 1e-15);
    }

    #[test]
    fn optimal_control_reduces_to_minus_pi_v() {
        let pi = [0.2, 0.5, 0.3];
        let v = [0.4, -1.0, 2.0];
        let pv = -(0.2 * 0.4 - 0.5 + 0.6);
        let h_const = optimal_control(&pi, &[1.0, -2.0, 3.0], &v, &[1.5, 1.5, 1.5]).unwrap();
        let y_const = optimal_control(&pi, &[4.0, 4.0, 4.0], &v, &[-1.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(h_const, pv, epsilon = 1e-14);
        assert_relative_eq!(y_const, pv, epsilon = 1e-14);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (2usize..6).prop_flat_map(|d| {
            (
                prop::collection::vec(0.01f64..1.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
                -10.0f64..10.0,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn optimal_control_is_shift_invariant((w, y, v, h, c) in arb_case()) {
            let total: f64 = w.iter().sum();
            let pi: Vec<f64> = w.iter().map(|x| x / total).collect();
            let shifted: Vec<f64> = y.iter().map(|x| x + c).collect();
            let a = optimal_control(&pi, &y, &v, &h).unwrap();
            let b = optimal_control(&pi, &shifted, &v, &h).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs() + c.abs() * 10.0));
        }

        #[test]
        fn lagrangian_is_nonnegative_and_homogeneous_in_sigma(
            a in crate::model::tests::arb_generator(5),
            seed in prop::collection::vec(-3.0f64..3.0, 16),
            scale in 0.01f64..100.0,
        ) {
            let d = a.dim();
            let model = Model::new(a, Function::new(vec![0.0; d]).unwrap(), ProbVector::uniform(d), 1.0).unwrap();
            let sigma: Vec<f64> = seed[..d].iter().map(|s| s.abs()).collect();
            let y = &seed[5..5 + d];
            let v = &seed[10..10 + d];
            let u = seed[15];
            let l = lagrangian(&sigma, y, v, u, &model).unwrap();
            prop_assert!(l >= 0.0);
            let scaled: Vec<f64> = sigma.iter().map(|s| s * scale).collect();
            let ls = lagrangian(&scaled, y, v, u, &model).unwrap();
            prop_assert!((ls - scale * l).abs() <= 1e-10 * (1.0 + ls.abs()));
        }
    }
}
