//! The dual backward equation
//!
//! ```text
//! −dY_t(x) = ((A Y_t)(x) + h(x)(U_t + V_t(x))) dt − V_t(x) dZ_t,   Y_T = F
//! ```
//!
//! written in the generic forward form `dY = f(Y, V, U, t) dt + V dZ`.
//!
//! Two solvers are provided. [`solve_backward_ode`] handles deterministic
//! terminal data and controls, where the adapted solution has `V ≡ 0` and `Y`
//! solves a linear ODE (integrated by RK4). [`solve_regression`] is a
//! backward least-squares Monte Carlo scheme on a `P̃` ensemble: conditional
//! expectations given `𝒵_{t_k}` are replaced by cross-path regressions on
//! polynomial features of the filter `π_{t_k}`, which is the Markov
//! statistic of the observation filtration.

use std::borrow::Cow;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::filter::FilterPath;
use crate::model::{dot, Function, Model, ProbVector};
use crate::pathsim::{Ensemble, Measure, TimeGrid};

/// Everything a feedback law may look at when choosing `U_{t_k}`.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackState<'a> {
    pub k: usize,
    pub t: f64,
    pub pi: &'a [f64],
    pub y: &'a [f64],
    pub v: &'a [f64],
    pub h: &'a [f64],
}

pub type FeedbackRule = Arc<dyn Fn(&FeedbackState<'_>) -> f64 + Send + Sync>;

/// An admissible (observation-adapted) control.
#[derive(Clone)]
pub enum Control {
    /// Deterministic values, one per grid point.
    Deterministic(Vec<f64>),
    /// A rule of `(t, π_t, Y_t, V_t)`.
    Feedback { label: String, rule: FeedbackRule },
    /// The covariance-form optimal law
    /// `U* = −(π(hY) − π(h)π(Y)) − π(V)`, plus a constant `shift`.
    Optimal { shift: f64 },
}

impl std::fmt::Debug for Control {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Control::Deterministic(u) => f
                .debug_tuple("Deterministic")
                .field(&format_args!("[{} values]", u.len()))
                .finish(),
            Control::Feedback { label, .. } => {
                f.debug_struct("Feedback").field("label", label).finish()
            }
            Control::Optimal { shift } => f.debug_struct("Optimal").field("shift", shift).finish(),
        }
    }
}

impl Control {
    pub fn zero(grid: &TimeGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &TimeGrid, c: f64) -> Self {
        Control::Deterministic(vec![c; grid.len()])
    }

    /// Linear ramp from `from` at `t = 0` to `to` at `t = T`.
    pub fn ramp(grid: &TimeGrid, from: f64, to: f64) -> Self {
        let t_end = grid.horizon();
        Control::Deterministic(
            (0..grid.len())
                .map(|k| from + (to - from) * grid.t(k) / t_end)
                .collect(),
        )
    }

    pub fn optimal() -> Self {
        Control::Optimal { shift: 0.0 }
    }

    pub fn optimal_shifted(shift: f64) -> Self {
        Control::Optimal { shift }
    }

    pub fn feedback(
        label: impl Into<String>,
        rule: impl Fn(&FeedbackState<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Control::Feedback {
            label: label.into(),
            rule: Arc::new(rule),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Control::Deterministic(_))
    }

    pub fn label(&self) -> String {
        match self {
            Control::Deterministic(u) => {
                if u.iter().all(|&v| v == u[0]) {
                    format!("constant({})", u[0])
                } else {
                    "deterministic".to_string()
                }
            }
            Control::Feedback { label, .. } => label.clone(),
            Control::Optimal { shift } if *shift == 0.0 => "optimal".to_string(),
            Control::Optimal { shift } => format!("optimal{shift:+}"),
        }
    }

    #[inline]
    pub fn evaluate(&self, s: &FeedbackState<'_>) -> f64 {
        match self {
            Control::Deterministic(u) => u[s.k],
            Control::Feedback { rule, .. } => rule(s),
            Control::Optimal { shift } => optimal_control_unchecked(s.pi, s.y, s.v, s.h) + shift,
        }
    }
}

/// `U* = −(π(hY) − π(h)π(Y)) − π(V)`; dimensions are not checked.
#[inline]
pub(crate) fn optimal_control_unchecked(pi: &[f64], y: &[f64], v: &[f64], h: &[f64]) -> f64 {
    let (mut phy, mut ph, mut py, mut pv) = (0.0, 0.0, 0.0, 0.0);
    for x in 0..pi.len() {
        phy += pi[x] * h[x] * y[x];
        ph += pi[x] * h[x];
        py += pi[x] * y[x];
        pv += pi[x] * v[x];
    }
    -(phy - ph * py) - pv
}

pub type PathFunctional = Arc<dyn Fn(&[f64]) -> Function + Send + Sync>;

/// Terminal value `Y_T = F`, possibly depending on the observation path.
#[derive(Clone)]
pub enum TerminalCondition {
    Deterministic(Function),
    /// `𝒵_T`-measurable terminal value computed from the full `z` path.
    PathFunctional {
        label: String,
        rule: PathFunctional,
    },
}

impl std::fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminalCondition::Deterministic(func) => {
                f.debug_tuple("Deterministic").field(func).finish()
            }
            TerminalCondition::PathFunctional { label, .. } => f
                .debug_struct("PathFunctional")
                .field("label", label)
                .finish(),
        }
    }
}

impl TerminalCondition {
    pub fn realize(&self, z: &[f64]) -> Cow<'_, Function> {
        match self {
            TerminalCondition::Deterministic(f) => Cow::Borrowed(f),
            TerminalCondition::PathFunctional { rule, .. } => Cow::Owned(rule(z)),
        }
    }

    pub fn as_deterministic(&self) -> Option<&Function> {
        match self {
            TerminalCondition::Deterministic(f) => Some(f),
            TerminalCondition::PathFunctional { .. } => None,
        }
    }
}

/// The drift `f(y, v, u, t)` of a backward equation `dY = f dt + V dZ`.
pub trait Driver: Sync {
    fn dim(&self) -> usize;
    fn drift(&self, k: usize, y: &[f64], v: &[f64], u: f64, out: &mut [f64]);
}

/// Drift of the filtering dual: `f(y, v, u) = −(A y + h (u + v))`.
#[derive(Debug, Clone, Copy)]
pub struct FilteringDual<'a> {
    pub model: &'a Model,
}

impl Driver for FilteringDual<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    #[inline]
    fn drift(&self, _k: usize, y: &[f64], v: &[f64], u: f64, out: &mut [f64]) {
        self.model.rates.apply_into(y, out);
        for x in 0..out.len() {
            out[x] = -(out[x] + self.model.h[x] * (u + v[x]));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    BackwardOde,
    Regression,
}

/// `(Y, V)` and the applied control `U` on the grid, for one path.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    d: usize,
    y: Vec<f64>,
    v: Vec<f64>,
    u: Vec<f64>,
    pub solver: SolverKind,
}

impl BsdeSolution {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn y(&self, k: usize) -> &[f64] {
        &self.y[k * self.d..(k + 1) * self.d]
    }

    #[inline]
    pub fn v(&self, k: usize) -> &[f64] {
        &self.v[k * self.d..(k + 1) * self.d]
    }

    #[inline]
    pub fn u(&self, k: usize) -> f64 {
        self.u[k]
    }

    pub fn controls(&self) -> &[f64] {
        &self.u
    }
}

/// Integrates `−dY/dt = A Y + h u(t)` backward from `Y_T = F` with RK4.
/// The control is linearly interpolated between grid points; `V ≡ 0`.
pub fn solve_backward_ode(
    model: &Model,
    terminal: &[f64],
    u: &[f64],
    grid: &TimeGrid,
) -> Result<BsdeSolution> {
    let d = model.dim();
    check_dim("terminal condition", d, terminal.len())?;
    check_dim("deterministic control", grid.len(), u.len())?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut y = vec![0.0; (n + 1) * d];
    y[n * d..].copy_from_slice(terminal);

    let rhs = |yv: &[f64], uu: f64, out: &mut [f64]| {
        model.rates.apply_into(yv, out);
        for x in 0..d {
            out[x] += model.h[x] * uu;
        }
    };
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for k in (0..n).rev() {
        let (head, tail) = y.split_at_mut((k + 1) * d);
        let next = &tail[..d];
        let cur = &mut head[k * d..];
        let u_mid = 0.5 * (u[k] + u[k + 1]);
        rhs(next, u[k + 1], &mut k1);
        for x in 0..d {
            tmp[x] = next[x] + 0.5 * dt * k1[x];
        }
        rhs(&tmp, u_mid, &mut k2);
        for x in 0..d {
            tmp[x] = next[x] + 0.5 * dt * k2[x];
        }
        rhs(&tmp, u_mid, &mut k3);
        for x in 0..d {
            tmp[x] = next[x] + dt * k3[x];
        }
        rhs(&tmp, u[k], &mut k4);
        for x in 0..d {
            cur[x] = next[x] + dt / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
        }
    }
    Ok(BsdeSolution {
        d,
        y,
        v: vec![0.0; (n + 1) * d],
        u: u.to_vec(),
        solver: SolverKind::BackwardOde,
    })
}

/// Forward estimator `S_t = μ(Y_0) − ∫_0^t U dZ` (left-point sums).
#[derive(Debug, Clone, PartialEq)]
pub struct SProcess {
    pub s: Vec<f64>,
}

pub fn s_process(y0: &[f64], prior: &ProbVector, u: &[f64], z: &[f64]) -> Result<SProcess> {
    check_dim("initial dual value", prior.len(), y0.len())?;
    if u.len() + 1 < z.len() {
        return Err(Error::DimensionMismatch {
            what: "control path",
            expected: z.len() - 1,
            got: u.len(),
        });
    }
    let mut s = Vec::with_capacity(z.len());
    let mut acc = dot(prior, y0);
    s.push(acc);
    for k in 0..z.len().saturating_sub(1) {
        acc -= u[k] * (z[k + 1] - z[k]);
        s.push(acc);
    }
    Ok(SProcess { s })
}

// ---------------------------------------------------------------------------
// Regression solver

/// How the regression target at step `k` is built from later steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetScheme {
    /// Target built from the fitted `Ŷ_{k+1}` (one-step projection).
    #[default]
    OneStep,
    /// Target built from the pathwise value carried back from `Y_T`
    /// (multi-step forward dynamic programming).
    MultiStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionConfig {
    /// Maximal total degree of the polynomial features in `π`.
    pub degree: usize,
    pub picard_iterations: usize,
    pub min_paths: usize,
    /// Design-matrix condition number above which the degree is lowered.
    pub max_condition: f64,
    /// Regress `(Ỹ_{k+1} − Ê[Ỹ_{k+1} | 𝒵_k]) ΔZ_k / dt` for `V_k` instead of
    /// the raw `Ỹ_{k+1} ΔZ_k / dt`. Same conditional mean, lower variance.
    pub centered_v: bool,
    pub scheme: TargetScheme,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            picard_iterations: 3,
            min_paths: 1000,
            max_condition: 1e10,
            centered_v: true,
            scheme: TargetScheme::OneStep,
        }
    }
}

/// All exponent tuples over `nvars` variables with total degree `≤ degree`,
/// ordered by total degree.
fn monomials(nvars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; nvars]];
    let mut frontier = vec![vec![0u8; nvars]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            // only raise variables at or after the last nonzero one to avoid duplicates
            let start = m.iter().rposition(|&e| e > 0).unwrap_or(0);
            for v in start..nvars {
                let mut e = m.clone();
                e[v] += 1;
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Polynomial features of the first `d − 1` filter coordinates, standardized
/// by their cross-path mean and spread at the current step.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub degree: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u8>>,
}

impl Basis {
    fn new(degree: usize, center: Vec<f64>, scale: Vec<f64>) -> Self {
        let exponents = monomials(center.len(), degree);
        Self {
            degree,
            center,
            scale,
            exponents,
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    fn eval(&self, pi: &[f64], out: &mut [f64]) {
        let nv = self.center.len();
        let mut xs = [0.0f64; 16];
        let xs = &mut xs[..nv.min(16)];
        let mut heap;
        let coords: &mut [f64] = if nv <= 16 {
            xs
        } else {
            heap = vec![0.0; nv];
            &mut heap
        };
        for v in 0..nv {
            coords[v] = if self.scale[v] > 0.0 {
                (pi[v] - self.center[v]) / self.scale[v]
            } else {
                0.0
            };
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut val = 1.0;
            for (c, &p) in coords.iter().zip(e) {
                for _ in 0..p {
                    val *= c;
                }
            }
            *o = val;
        }
    }
}

/// Fitted regression coefficients for one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    pub basis: Basis,
    /// `p × d`, row-major by feature.
    beta_y: Vec<f64>,
    /// Coefficients of the `Y_k` iterate that entered the final drift.
    beta_drift: Vec<f64>,
    beta_v: Vec<f64>,
    /// Mean over coordinates of the `R²` of the final `Y` regression.
    pub r_squared: f64,
    /// RMS change of `Y_k` over the last Picard iteration.
    pub picard_residual: f64,
    /// RMS of (target − fit) of the final `Y` regression.
    pub regression_residual: f64,
    pub condition: f64,
    pub degraded: bool,
}

/// Diagnostics of a regression solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDiagnostics {
    pub steps_degraded: usize,
    pub max_picard_residual: f64,
    pub mean_r_squared: f64,
    /// RMS over paths and steps of the per-step `Y` regression residual.
    pub step_residual_rms: f64,
    /// Cross-path RMS of `Y_0 + Σ f dt + Σ V ΔZ − Y_T` (max over states).
    pub representation_residual: f64,
}

/// Roundoff allowance, relative to the terminal scale, in [`RegressionDiagnostics::representation_ok`].
pub const REPRESENTATION_FLOOR: f64 = 1e-9;

impl RegressionDiagnostics {
    /// `representation_residual ≤ 3·step_residual_rms + REPRESENTATION_FLOOR·scale`.
    pub fn representation_ok(&self, scale: f64) -> bool {
        self.representation_residual
            <= 3.0 * self.step_residual_rms + REPRESENTATION_FLOOR * scale.max(1.0)
    }
}

/// Regression solution: per-step coefficients, evaluable on any filter path.
#[derive(Debug, Clone)]
pub struct RegressionBsde {
    d: usize,
    grid: TimeGrid,
    steps: Vec<StepFit>,
    control: Control,
    terminal: TerminalCondition,
    pub diagnostics: RegressionDiagnostics,
}

struct Design {
    p: usize,
    phi: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    basis: Basis,
    condition: f64,
    degraded: bool,
}

fn build_design(pis: &[&[f64]], nvars: usize, max_degree: usize, max_condition: f64) -> Design {
    let n = pis.len();
    let nf = n as f64;
    let mut center = vec![0.0; nvars];
    let mut scale = vec![0.0; nvars];
    for pi in pis {
        for v in 0..nvars {
            center[v] += pi[v];
        }
    }
    center.iter_mut().for_each(|c| *c /= nf);
    for pi in pis {
        for v in 0..nvars {
            scale[v] += (pi[v] - center[v]).powi(2);
        }
    }
    scale.iter_mut().for_each(|s| *s = (*s / nf).sqrt());
    let spread = scale.iter().all(|&s| s > 1e-12);

    let mut degree = if spread { max_degree } else { 0 };
    loop {
        let basis = Basis::new(degree, center.clone(), scale.clone());
        let p = basis.len();
        let mut phi = vec![0.0; n * p];
        for (row, pi) in phi.chunks_mut(p).zip(pis) {
            basis.eval(pi, row);
        }
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for row in phi.chunks(p) {
            for a in 0..p {
                let ra = row[a];
                for b in a..p {
                    gram[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        gram /= nf;
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let lmax = eig.iter().cloned().fold(f64::MIN, f64::max);
        let lmin = eig.iter().cloned().fold(f64::MAX, f64::min);
        let condition = if lmin > 0.0 {
            (lmax / lmin).sqrt()
        } else {
            f64::INFINITY
        };
        if (condition <= max_condition || degree == 0) && lmin > 0.0 {
            if let Some(chol) = Cholesky::new(gram) {
                return Design {
                    p,
                    phi,
                    chol,
                    basis,
                    condition,
                    degraded: degree < max_degree,
                };
            }
        }
        degree -= 1;
    }
}

impl Design {
    /// Least-squares coefficients (`p × d`) for `d` target columns.
    fn fit(&self, targets: &[f64], d: usize) -> Vec<f64> {
        let p = self.p;
        let n = targets.len() / d;
        let mut rhs = DMatrix::<f64>::zeros(p, d);
        for (row, t) in self.phi.chunks(p).zip(targets.chunks(d)) {
            for a in 0..p {
                for x in 0..d {
                    rhs[(a, x)] += row[a] * t[x];
                }
            }
        }
        rhs /= n as f64;
        let sol = self.chol.solve(&rhs);
        let mut beta = vec![0.0; p * d];
        for a in 0..p {
            for x in 0..d {
                beta[a * d + x] = sol[(a, x)];
            }
        }
        beta
    }

    fn predict_into(&self, beta: &[f64], d: usize, out: &mut [f64]) {
        let p = self.p;
        for (row, o) in self.phi.chunks(p).zip(out.chunks_mut(d)) {
            predict_row(row, beta, d, o);
        }
    }
}

#[inline]
fn predict_row(features: &[f64], beta: &[f64], d: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (a, &f) in features.iter().enumerate() {
        for x in 0..d {
            out[x] += f * beta[a * d + x];
        }
    }
}

fn r_squared(targets: &[f64], fitted: &[f64], d: usize) -> (f64, f64) {
    let n = targets.len() / d;
    let mut total = 0.0;
    let mut ss_all = 0.0;
    for x in 0..d {
        let mean = targets.iter().skip(x).step_by(d).sum::<f64>() / n as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for i in 0..n {
            let t = targets[i * d + x];
            ss_res += (t - fitted[i * d + x]).powi(2);
            ss_tot += (t - mean).powi(2);
        }
        ss_all += ss_res;
        let floor = 1e-24 * (1.0 + mean * mean) * n as f64;
        total += if ss_tot > floor {
            1.0 - ss_res / ss_tot
        } else {
            1.0
        };
    }
    (total / d as f64, (ss_all / (n * d) as f64).sqrt())
}

/// Backward least-squares Monte Carlo solution of `dY = f dt + V dZ`,
/// `Y_T = ξ`, for the filtering-dual driver.
///
/// At each step `k` (from `n − 1` down to 0), with target `Ỹ_{k+1}`:
/// `V_k = Ê[(Ỹ_{k+1} − Ê[Ỹ_{k+1}|𝒵_k]) ΔZ_k | 𝒵_k] / dt`, then `Y_k` and `U_k`
/// are resolved jointly by an explicit predictor and Picard iteration on
/// `Y_k = Ê[Ỹ_{k+1} − ½(f(Y_k, V_k, U_k) + f(Ỹ_{k+1}, V_k, U_{k+1}')) dt | 𝒵_k]`.
/// A deterministic control enters with `U_{k+1}' = u(t_{k+1})`; a feedback
/// control is held at its `𝒵_k`-measurable value, `U_{k+1}' = U_k`.
pub fn solve_regression(
    model: &Model,
    terminal: &TerminalCondition,
    control: &Control,
    ensemble: &Ensemble,
    filters: &[FilterPath],
    config: &RegressionConfig,
) -> Result<RegressionBsde> {
    solve_regression_with(
        &FilteringDual { model },
        model,
        terminal,
        control,
        ensemble,
        filters,
        config,
    )
}

pub fn solve_regression_with<D: Driver>(
    driver: &D,
    model: &Model,
    terminal: &TerminalCondition,
    control: &Control,
    ensemble: &Ensemble,
    filters: &[FilterPath],
    config: &RegressionConfig,
) -> Result<RegressionBsde> {
    let n_paths = ensemble.len();
    if n_paths < config.min_paths {
        return Err(Error::InvalidArgument(format!(
            "regression solver needs at least {} paths, got {n_paths}",
            config.min_paths
        )));
    }
    if ensemble.measure != Measure::PTilde {
        return Err(Error::InvalidArgument(
            "regression solver requires an ensemble simulated under P-tilde".into(),
        ));
    }
    check_dim("filter paths", n_paths, filters.len())?;
    let d = driver.dim();
    let grid = ensemble.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let h = model.h.as_slice();

    // carried targets Ỹ (n_paths × d)
    let mut carried = vec![0.0; n_paths * d];
    for (i, p) in ensemble.paths.iter().enumerate() {
        let xi = terminal.realize(&p.z);
        check_dim("terminal condition", d, xi.len())?;
        carried[i * d..(i + 1) * d].copy_from_slice(&xi);
    }

    let mut steps: Vec<StepFit> = Vec::with_capacity(n);
    let mut buf_pred = vec![0.0; n_paths * d];
    let mut buf_target = vec![0.0; n_paths * d];
    let mut buf_v = vec![0.0; n_paths * d];
    let mut buf_y = vec![0.0; n_paths * d];
    let mut f_cur = vec![0.0; d];
    let mut f_next = vec![0.0; d];
    let mut step_ss = 0.0;
    let mut next_u = vec![0.0; n_paths];
    let freeze_u = !control.is_deterministic();

    for k in (0..n).rev() {
        let pis: Vec<&[f64]> = filters.iter().map(|f| f.pi(k)).collect();
        let design = build_design(&pis, d - 1, config.degree, config.max_condition);
        if design.degraded && k > 0 {
            log::info!(
                "step {k}: regression degree lowered to {} (condition {:.3e})",
                design.basis.degree,
                design.condition
            );
        }

        // conditional expectation of the carried target
        let beta_pred = design.fit(&carried, d);
        design.predict_into(&beta_pred, d, &mut buf_pred);

        // V_k
        for (i, p) in ensemble.paths.iter().enumerate() {
            let dz = p.dz(k);
            for x in 0..d {
                let base = if config.centered_v {
                    buf_pred[i * d + x]
                } else {
                    0.0
                };
                buf_target[i * d + x] = (carried[i * d + x] - base) * dz / dt;
            }
        }
        let beta_v = design.fit(&buf_target, d);
        design.predict_into(&beta_v, d, &mut buf_v);
        // deterministic controls are known at t_{k+1}; feedback is frozen at U_k
        if !freeze_u {
            fill_controls(
                control,
                k + 1,
                grid.t(k + 1),
                filters,
                &carried,
                &buf_v,
                h,
                &mut next_u,
            );
        }

        // explicit predictor, then Picard iteration for (Y_k, U_k)
        let t = grid.t(k);
        let mut beta_y = beta_pred.clone();
        let mut beta_drift = beta_pred.clone();
        let mut picard_residual = 0.0;
        buf_y.copy_from_slice(&carried);
        for it in 0..=config.picard_iterations.max(1) {
            for i in 0..n_paths {
                let r = i * d..(i + 1) * d;
                let state = FeedbackState {
                    k,
                    t,
                    pi: pis[i],
                    y: &buf_y[r.clone()],
                    v: &buf_v[r.clone()],
                    h,
                };
                let u = control.evaluate(&state);
                driver.drift(k, &buf_y[r.clone()], &buf_v[r.clone()], u, &mut f_cur);
                let u_next = if freeze_u { u } else { next_u[i] };
                driver.drift(
                    k,
                    &carried[r.clone()],
                    &buf_v[r.clone()],
                    u_next,
                    &mut f_next,
                );
                for x in 0..d {
                    buf_target[i * d + x] = carried[i * d + x] - 0.5 * (f_cur[x] + f_next[x]) * dt;
                }
            }
            beta_drift = std::mem::replace(&mut beta_y, design.fit(&buf_target, d));
            design.predict_into(&beta_y, d, &mut buf_pred);
            if it > 0 {
                let ss: f64 = buf_pred
                    .iter()
                    .zip(&buf_y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                picard_residual = (ss / (n_paths * d) as f64).sqrt();
            }
            std::mem::swap(&mut buf_y, &mut buf_pred);
        }
        let (r2, resid) = r_squared(&buf_target, &buf_y, d);
        step_ss += resid * resid;

        match config.scheme {
            TargetScheme::OneStep => carried.copy_from_slice(&buf_y),
            TargetScheme::MultiStep => {
                for (i, p) in ensemble.paths.iter().enumerate() {
                    let dz = p.dz(k);
                    for x in 0..d {
                        carried[i * d + x] = buf_target[i * d + x] - buf_v[i * d + x] * dz;
                    }
                }
            }
        }

        steps.push(StepFit {
            basis: design.basis,
            beta_y,
            beta_drift,
            beta_v,
            r_squared: r2,
            picard_residual,
            regression_residual: resid,
            condition: design.condition,
            degraded: design.degraded,
        });
    }
    steps.reverse();

    let diagnostics = RegressionDiagnostics {
        steps_degraded: steps.iter().skip(1).filter(|s| s.degraded).count(),
        max_picard_residual: steps.iter().map(|s| s.picard_residual).fold(0.0, f64::max),
        mean_r_squared: steps.iter().map(|s| s.r_squared).sum::<f64>() / n as f64,
        step_residual_rms: (step_ss / n as f64).sqrt(),
        representation_residual: 0.0,
    };
    let mut solved = RegressionBsde {
        d,
        grid,
        steps,
        control: control.clone(),
        terminal: terminal.clone(),
        diagnostics,
    };
    solved.diagnostics.representation_residual =
        solved.representation_residual(driver, model, ensemble, filters);
    Ok(solved)
}

#[allow(clippy::too_many_arguments)]
fn fill_controls(
    control: &Control,
    k: usize,
    t: f64,
    filters: &[FilterPath],
    y: &[f64],
    v: &[f64],
    h: &[f64],
    out: &mut [f64],
) {
    let d = h.len();
    for (i, u) in out.iter_mut().enumerate() {
        let r = i * d..(i + 1) * d;
        *u = control.evaluate(&FeedbackState {
            k,
            t,
            pi: filters[i].pi(k),
            y: &y[r.clone()],
            v: &v[r],
            h,
        });
    }
}

impl RegressionBsde {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> &[StepFit] {
        &self.steps
    }

    pub fn control(&self) -> &Control {
        &self.control
    }

    pub fn terminal(&self) -> &TerminalCondition {
        &self.terminal
    }

    /// `(Y_k, V_k)` at filter state `pi`, for `k < n`.
    pub fn evaluate(&self, k: usize, pi: &[f64], y: &mut [f64], v: &mut [f64]) {
        let step = &self.steps[k];
        let mut features = [0.0f64; 64];
        let p = step.basis.len();
        let mut heap;
        let feats: &mut [f64] = if p <= 64 {
            &mut features[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        step.basis.eval(pi, feats);
        predict_row(feats, &step.beta_y, self.d, y);
        predict_row(feats, &step.beta_v, self.d, v);
    }

    /// Materializes `(Y, V, U)` along one path. At `t = T`, `Y` is the
    /// realized terminal value and `V` repeats the last interval's value.
    pub fn path_solution(&self, model: &Model, fp: &FilterPath, z: &[f64]) -> BsdeSolution {
        let d = self.d;
        let n = self.grid.n_steps();
        let mut y = vec![0.0; (n + 1) * d];
        let mut v = vec![0.0; (n + 1) * d];
        let mut u = vec![0.0; n + 1];
        for k in 0..n {
            let (ys, vs) = (&mut y[k * d..(k + 1) * d], &mut v[k * d..(k + 1) * d]);
            self.evaluate(k, fp.pi(k), ys, vs);
        }
        y[n * d..].copy_from_slice(&self.terminal.realize(z));
        let (head, tail) = v.split_at_mut(n * d);
        tail.copy_from_slice(&head[(n - 1) * d..]);
        for k in 0..=n {
            let state = FeedbackState {
                k,
                t: self.grid.t(k),
                pi: fp.pi(k),
                y: &y[k * d..(k + 1) * d],
                v: &v[k * d..(k + 1) * d],
                h: &model.h,
            };
            u[k] = self.control.evaluate(&state);
        }
        BsdeSolution {
            d,
            y,
            v,
            u,
            solver: SolverKind::Regression,
        }
    }

    fn representation_residual<D: Driver>(
        &self,
        driver: &D,
        model: &Model,
        ensemble: &Ensemble,
        filters: &[FilterPath],
    ) -> f64 {
        let d = self.d;
        let dt = self.grid.dt();
        let n = self.grid.n_steps();
        let mut ss = vec![0.0; d];
        let (mut f0, mut f1) = (vec![0.0; d], vec![0.0; d]);
        let mut y_drift = vec![0.0; d];
        let mut feats = Vec::new();
        for (p, fp) in ensemble.paths.iter().zip(filters) {
            let sol = self.path_solution(model, fp, &p.z);
            let mut acc = sol.y(0).to_vec();
            for k in 0..n {
                let step = &self.steps[k];
                feats.resize(step.basis.len(), 0.0);
                step.basis.eval(fp.pi(k), &mut feats);
                predict_row(&feats, &step.beta_drift, d, &mut y_drift);
                let u = self.control.evaluate(&FeedbackState {
                    k,
                    t: self.grid.t(k),
                    pi: fp.pi(k),
                    y: &y_drift,
                    v: sol.v(k),
                    h: &model.h,
                });
                driver.drift(k, &y_drift, sol.v(k), u, &mut f0);
                let u_next = if self.control.is_deterministic() {
                    sol.u(k + 1)
                } else {
                    u
                };
                driver.drift(k, sol.y(k + 1), sol.v(k), u_next, &mut f1);
                let dz = p.dz(k);
                for x in 0..d {
                    acc[x] += 0.5 * (f0[x] + f1[x]) * dt + sol.v(k)[x] * dz;
                }
            }
            for x in 0..d {
                ss[x] += (acc[x] - sol.y(n)[x]).powi(2);
            }
        }
        ss.iter()
            .map(|s| (s / ensemble.len() as f64).sqrt())
            .fold(0.0, f64::max)
    }
}

/// A solved dual equation: either the shared deterministic ODE solution or a
/// regression solution evaluated per path.
#[derive(Debug, Clone)]
pub enum SolvedBsde {
    Ode(BsdeSolution),
    Regression(RegressionBsde),
}

impl SolvedBsde {
    /// Picks the exact ODE solver when both control and terminal value are
    /// deterministic, the regression solver otherwise.
    pub fn solve(
        model: &Model,
        terminal: &TerminalCondition,
        control: &Control,
        ensemble: &Ensemble,
        filters: &[FilterPath],
        config: &RegressionConfig,
    ) -> Result<Self> {
        match (control, terminal) {
            (Control::Deterministic(u), TerminalCondition::Deterministic(f)) => Ok(
                SolvedBsde::Ode(solve_backward_ode(model, f, u, &ensemble.grid)?),
            ),
            _ => Ok(SolvedBsde::Regression(solve_regression(
                model, terminal, control, ensemble, filters, config,
            )?)),
        }
    }

    pub fn path<'a>(&'a self, model: &Model, fp: &FilterPath, z: &[f64]) -> Cow<'a, BsdeSolution> {
        match self {
            SolvedBsde::Ode(sol) => Cow::Borrowed(sol),
            SolvedBsde::Regression(reg) => Cow::Owned(reg.path_solution(model, fp, z)),
        }
    }

    pub fn kind(&self) -> SolverKind {
        match self {
            SolvedBsde::Ode(_) => SolverKind::BackwardOde,
            SolvedBsde::Regression(_) => SolverKind::Regression,
        }
    }

    pub fn diagnostics(&self) -> Option<&RegressionDiagnostics> {
        match self {
            SolvedBsde::Ode(_) => None,
            SolvedBsde::Regression(r) => Some(&r.diagnostics),
        }
    }
}

/// Writes `path_id,k,t,y_1..y_d,v_1..v_d,u,s` for the given path solutions.
pub fn write_bsde_csv<W: Write>(
    out: &mut W,
    grid: &TimeGrid,
    rows: impl IntoIterator<Item = (usize, BsdeSolution, SProcess)>,
) -> Result<()> {
    let mut header_done = false;
    for (i, sol, s) in rows {
        let d = sol.dim();
        if !header_done {
            write!(out, "path_id,k,t")?;
            for x in 1..=d {
                write!(out, ",y_{x}")?;
            }
            for x in 1..=d {
                write!(out, ",v_{x}")?;
            }
            writeln!(out, ",u,s")?;
            header_done = true;
        }
        for k in 0..sol.len() {
            write!(out, "{i},{k},{}", grid.t(k))?;
            for y in sol.y(k) {
                write!(out, ",{y}")?;
            }
            for v in sol.v(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{},{}", sol.u(k), s.s[k])?;
        }
    }
    Ok(())
}
