//! Experiment runner: builds the ensemble and filters named by a config,
//! dispatches one experiment, writes `trace_*.csv` files and `manifest.txt`.
//!
//! Verdicts map to exit codes: 0 when every check passes, 1 when one fails.
//! Errors map through [`Error::exit_code`].

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bsde::{
    s_process, solve_regression, write_bsde_csv, Control, SolvedBsde, SolverKind, TerminalCondition,
};
use crate::config::{config_hash, ControlBlock, Diagnostic, ExperimentConfig, ExperimentKind};
use crate::dual::{
    check_drift_identity, check_duality, check_martingale, check_optimal_cost, value_function,
    Problem, Quadrature, Zeta, Z_SCORE,
};
use crate::error::{Error, Result};
use crate::filter::{
    consistency_check, minimum_variance_witness, run_filters, write_filter_csv, FilterPath,
    ZakaiScheme,
};
use crate::model::{Function, Model};
use crate::pathsim::{Ensemble, Measure, TimeGrid, INTEGRITY_TOL};
use crate::stats::MeanEstimate;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offset between the master seed and the seed of the independent `P` ensemble.
pub const PHYSICAL_SEED_OFFSET: u64 = 1;

/// Error tolerance of the regression solver against the backward ODE.
pub const CROSS_VALIDATION_TOL: f64 = 0.01;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output.directory`.
    pub out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Indeterminate => "indeterminate",
        })
    }
}

/// One verified identity with its statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// The identity, written out as a formula.
    pub identity: String,
    pub verdict: Verdict,
    pub stats: Vec<(String, String)>,
}

impl Check {
    fn new(name: impl Into<String>, identity: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            identity: identity.into(),
            verdict: Verdict::from_bool(ok),
            stats: Vec::new(),
        }
    }

    fn stat(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.stats.push((key.to_string(), value.to_string()));
        self
    }

    fn estimate(self, key: &str, e: &MeanEstimate) -> Self {
        self.stat(&format!("{key}_mean"), e.mean)
            .stat(&format!("{key}_se"), e.se)
    }
}

/// Provenance and verdicts of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub workers: usize,
    pub wall_clock_s: f64,
    /// Run-level facts (solver kind, clamp counts, ...).
    pub info: Vec<(String, String)>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn verdict(&self) -> Verdict {
        if self.checks.iter().any(|c| c.verdict == Verdict::Fail) {
            Verdict::Fail
        } else if self.checks.is_empty() || self.checks.iter().all(|c| c.verdict == Verdict::Pass) {
            Verdict::Pass
        } else {
            Verdict::Indeterminate
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.verdict() {
            Verdict::Fail => 1,
            _ => 0,
        }
    }

    /// `key = value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("artifact", &"dualfilter");
        kv("version", &ARTIFACT_VERSION);
        kv("experiment", &self.experiment);
        kv("config_hash", &self.config_hash);
        kv("seed", &self.seed);
        kv("n_paths", &self.n_paths);
        kv("n_steps", &self.n_steps);
        kv("dt", &self.dt);
        kv("workers", &self.workers);
        kv("wall_clock_s", &format!("{:.3}", self.wall_clock_s));
        for (k, v) in &self.info {
            kv(k, v);
        }
        for c in &self.checks {
            kv(&format!("check.{}.identity", c.name), &c.identity);
            kv(&format!("check.{}.verdict", c.name), &c.verdict);
            for (k, v) in &c.stats {
                kv(&format!("check.{}.{k}", c.name), v);
            }
        }
        kv("files", &self.files.join(","));
        kv("verdict", &self.verdict());
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Full validation without simulating. A file that does not parse yields a
/// single diagnostic carrying the parser message.
pub fn validate_text(text: &str) -> Vec<Diagnostic> {
    match ExperimentConfig::parse(text) {
        Ok(cfg) => cfg.diagnostics(),
        Err(e) => vec![Diagnostic {
            location: "config".into(),
            message: e.to_string(),
        }],
    }
}

pub fn validate_file(path: &Path) -> Result<Vec<Diagnostic>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(validate_text(&text))
}

pub fn run_file(path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let (cfg, text) = ExperimentConfig::load(path)?;
    run(&cfg, &text, opts)
}

/// Runs the configured experiment and writes its outputs.
pub fn run(cfg: &ExperimentConfig, text: &str, opts: &RunOptions) -> Result<RunOutcome> {
    let start = Instant::now();
    let model = cfg.build_model()?;
    let grid = cfg.build_grid()?;
    let seed = opts.seed.unwrap_or(cfg.mc.seed);
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.directory.clone());
    fs::create_dir_all(&out_dir)?;

    let mut ctx = Context {
        cfg,
        model: &model,
        grid,
        seed,
        out_dir: &out_dir,
        info: Vec::new(),
        checks: Vec::new(),
        files: Vec::new(),
    };
    log::info!(
        "{}: {} paths, {} steps, seed {seed}",
        cfg.experiment,
        cfg.mc.n_paths,
        grid.n_steps()
    );
    match cfg.experiment {
        ExperimentKind::Simulate => ctx.simulate()?,
        ExperimentKind::Filter => ctx.filter()?,
        ExperimentKind::BsdeSolve => ctx.bsde_solve()?,
        ExperimentKind::DualityCheck => ctx.duality()?,
        ExperimentKind::MartingaleCheck => ctx.martingale()?,
        ExperimentKind::DriftCheck => ctx.drift()?,
        ExperimentKind::OptimalCost => ctx.optimal_cost()?,
        ExperimentKind::ValueFunction => ctx.value()?,
    }

    let manifest = RunManifest {
        experiment: cfg.experiment,
        config_hash: config_hash(text),
        seed,
        n_paths: cfg.mc.n_paths,
        n_steps: grid.n_steps(),
        dt: grid.dt(),
        workers: rayon::current_num_threads(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        info: ctx.info,
        checks: ctx.checks,
        files: ctx.files,
    };
    fs::write(out_dir.join("manifest.txt"), manifest.render())?;
    Ok(RunOutcome { manifest, out_dir })
}

fn measure_tag(measure: Measure) -> &'static str {
    match measure {
        Measure::PTilde => "reference",
        Measure::P => "physical",
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a Model,
    grid: TimeGrid,
    seed: u64,
    out_dir: &'a Path,
    info: Vec<(String, String)>,
    checks: Vec<Check>,
    files: Vec<String>,
}

impl Context<'_> {
    fn info(&mut self, key: &str, value: impl fmt::Display) {
        self.info.push((key.to_string(), value.to_string()));
    }

    fn trace(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        if !self.cfg.writes_csv() {
            return Ok(());
        }
        let file = format!("trace_{name}.csv");
        let mut w = BufWriter::new(File::create(self.out_dir.join(&file))?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(file);
        Ok(())
    }

    fn paths(&mut self, measure: Measure) -> Result<Ensemble> {
        let (n, seed) = match measure {
            Measure::PTilde => (self.cfg.mc.n_paths, self.seed),
            Measure::P => (
                self.cfg.checks.physical_paths,
                self.seed.wrapping_add(PHYSICAL_SEED_OFFSET),
            ),
        };
        let tag = measure_tag(measure);
        self.info(&format!("{tag}_ensemble.paths"), n);
        self.info(&format!("{tag}_ensemble.seed"), seed);
        Ensemble::generate(self.model, self.grid, n, seed, measure)
    }

    fn ensemble(&mut self, measure: Measure) -> Result<(Ensemble, Vec<FilterPath>)> {
        let ens = self.paths(measure)?;
        let filters = run_filters(self.model, &ens)?;
        let clamps: usize = filters.iter().map(|f| f.clamp_events).sum();
        self.info(
            &format!("{}_ensemble.filter_clamp_events", measure_tag(measure)),
            clamps,
        );
        Ok((ens, filters))
    }

    fn physical(&mut self) -> Result<Option<(Ensemble, Vec<FilterPath>)>> {
        if self.cfg.checks.physical_paths == 0 {
            Ok(None)
        } else {
            self.ensemble(Measure::P).map(Some)
        }
    }

    fn common_info(&mut self) {
        self.info(
            "filter_scheme",
            format!("{:?}", ZakaiScheme::default()).to_lowercase(),
        );
        self.info(
            "quadrature",
            format!("{:?}", Quadrature::default()).to_lowercase(),
        );
    }

    fn terminal(&self) -> Result<Function> {
        self.cfg.build_terminal()
    }

    fn control(&self) -> Result<Control> {
        self.cfg.control.build(&self.grid)
    }

    fn solve(
        &mut self,
        control: &Control,
        ens: &Ensemble,
        filters: &[FilterPath],
    ) -> Result<SolvedBsde> {
        let terminal = self.cfg.terminal_condition()?;
        let solved = SolvedBsde::solve(
            self.model,
            &terminal,
            control,
            ens,
            filters,
            &self.cfg.regression_config(),
        )?;
        let label = control.label();
        self.info(
            &format!("solver.{label}"),
            match solved.kind() {
                SolverKind::BackwardOde => "backward-ode",
                SolverKind::Regression => "regression",
            },
        );
        if let Some(diag) = solved.diagnostics() {
            self.info(
                &format!("solver.{label}.steps_degraded"),
                diag.steps_degraded,
            );
            self.info(
                &format!("solver.{label}.max_picard_residual"),
                diag.max_picard_residual,
            );
            self.info(
                &format!("solver.{label}.mean_r_squared"),
                diag.mean_r_squared,
            );
        }
        Ok(solved)
    }

    fn dump_bsde(
        &mut self,
        solved: &SolvedBsde,
        ens: &Ensemble,
        filters: &[FilterPath],
    ) -> Result<()> {
        let n = self.cfg.output.dump_paths.min(ens.len());
        let mut rows = Vec::with_capacity(n);
        for (i, (p, fp)) in ens.paths.iter().zip(filters).take(n).enumerate() {
            let sol = solved.path(self.model, fp, &p.z).into_owned();
            let s = s_process(sol.y(0), &self.model.prior, sol.controls(), &p.z)?;
            rows.push((i, sol, s));
        }
        let grid = self.grid;
        self.trace("bsde", |w| write_bsde_csv(w, &grid, rows))
    }

    fn simulate(&mut self) -> Result<()> {
        let ens = self.paths(Measure::PTilde)?;
        let cps = self.grid.quarter_checkpoints();
        for (k, est) in ens.density_means(&cps)? {
            self.checks.push(
                Check::new(
                    format!("density_mean.k{k}"),
                    "Ẽ[D_t] = 1",
                    est.within(1.0, Z_SCORE, 0.0),
                )
                .stat("t", self.grid.t(k))
                .estimate("d", &est),
            );
        }
        let gap = ens.log_density_gap(self.model)?;
        self.checks.push(
            Check::new(
                "log_density_forms",
                "Σ[h(X)ΔZ − ½h(X)²dt] = Σ[h(X)ΔW + ½h(X)²dt]",
                gap <= INTEGRITY_TOL,
            )
            .stat("max_relative_gap", gap)
            .stat("tolerance", INTEGRITY_TOL),
        );
        let dump = self.cfg.output.dump_paths;
        self.trace("paths", |w| ens.write_csv(w, dump))
    }

    fn filter(&mut self) -> Result<()> {
        self.common_info();
        let (_, filters) = self.ensemble(Measure::PTilde)?;
        let d = self.model.dim();
        let n = self.grid.n_steps();
        let horizon = self.grid.horizon();
        let marginal = self.model.marginal(horizon);
        let dt = self.grid.dt();
        for x in 0..d {
            let mut m = crate::stats::Moments::default();
            for fp in &filters {
                m.push(fp.mass(n) * fp.pi(n)[x]);
            }
            let est = m.estimate();
            self.checks.push(
                Check::new(
                    format!("marginal.x{}", x + 1),
                    "Ẽ[σ_T(1_x)] = (exp(AᵀT)μ)(x)",
                    est.within(marginal[x], Z_SCORE, dt),
                )
                .estimate("sigma", &est)
                .stat("expected", marginal[x])
                .stat("slack", dt),
            );
        }
        let worst = filters
            .iter()
            .map(|fp| consistency_check(fp, &self.model.h))
            .fold(0.0, f64::max);
        self.checks.push(
            Check::new("normalization", "σ_t(h) = σ_t(1)·π_t(h)", worst <= 1e-12)
                .stat("max_relative_gap", worst),
        );
        if self.model.h.iter().all(|&v| v == 0.0) {
            let rel = filters
                .iter()
                .map(|fp| {
                    fp.pi(n)
                        .iter()
                        .zip(&marginal)
                        .map(|(p, q)| (p - q).abs() / q.abs().max(f64::MIN_POSITIVE))
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            self.checks.push(
                Check::new(
                    "no_observation",
                    "π_T = exp(AᵀT)μ when h ≡ 0",
                    rel <= 5.0 * dt,
                )
                .stat("max_relative_error", rel)
                .stat("tolerance", 5.0 * dt),
            );
        }
        if let Some((pens, pfil)) = self.physical()? {
            for x in 0..d {
                let mut m = crate::stats::Moments::default();
                for fp in &pfil {
                    m.push(fp.pi(n)[x]);
                }
                let est = m.estimate();
                self.checks.push(
                    Check::new(
                        format!("physical_marginal.x{}", x + 1),
                        "E[π_T(1_x)] = (exp(AᵀT)μ)(x)",
                        est.within(marginal[x], Z_SCORE, dt),
                    )
                    .estimate("pi", &est)
                    .stat("expected", marginal[x]),
                );
            }
            let f = self.terminal()?;
            let cmp = minimum_variance_witness(self.model, &pens, &pfil, &f)?;
            self.checks.push(
                Check::new(
                    "minimum_variance",
                    "E|F(X_T) − π_T(F)|² ≤ E|F(X_T) − Ŝ|² for Ŝ ∈ {E F(X_T), a + bZ_T}",
                    cmp.filter_is_best(),
                )
                .estimate("filter", &cmp.filter)
                .estimate("prior_mean", &cmp.prior_mean)
                .estimate("linear_in_z", &cmp.linear_in_z),
            );
        }
        let (grid, dump) = (self.grid, self.cfg.output.dump_paths);
        self.trace("filter", |w| write_filter_csv(w, &filters, &grid, dump))
    }

    fn bsde_solve(&mut self) -> Result<()> {
        self.common_info();
        let (ens, filters) = self.ensemble(Measure::PTilde)?;
        let control = self.control()?;
        let solved = self.solve(&control, &ens, &filters)?;
        let scale = self.terminal()?.max_abs();
        if let SolvedBsde::Ode(ode) = &solved {
            if ens.len() >= crate::config::MIN_REGRESSION_PATHS {
                let terminal = TerminalCondition::Deterministic(self.terminal()?);
                let reg = solve_regression(
                    self.model,
                    &terminal,
                    &control,
                    &ens,
                    &filters,
                    &self.cfg.regression_config(),
                )?;
                let mut err: f64 = 0.0;
                for (p, fp) in ens.paths.iter().zip(&filters) {
                    let sol = reg.path_solution(self.model, fp, &p.z);
                    for k in 0..self.grid.len() {
                        for (a, b) in sol.y(k).iter().zip(ode.y(k)) {
                            err = err.max((a - b).abs());
                        }
                    }
                }
                self.checks.push(
                    Check::new(
                        "cross_validation",
                        "max_{k,x,paths} |Y_k^regression(x) − Y_k^ode(x)| ≤ tol",
                        err <= CROSS_VALIDATION_TOL,
                    )
                    .stat("max_error", err)
                    .stat("tolerance", CROSS_VALIDATION_TOL),
                );
                self.representation_check(&reg.diagnostics, scale);
            }
        }
        if let SolvedBsde::Regression(reg) = &solved {
            self.representation_check(&reg.diagnostics, scale);
        }
        self.dump_bsde(&solved, &ens, &filters)
    }

    fn representation_check(&mut self, diag: &crate::bsde::RegressionDiagnostics, scale: f64) {
        self.checks.push(
            Check::new(
                "representation",
                "rms|Y_0 + Σ f dt + Σ V ΔZ − Y_T| ≤ 3·rms(step residual)",
                diag.representation_ok(scale),
            )
            .stat("representation_residual", diag.representation_residual)
            .stat("step_residual_rms", diag.step_residual_rms)
            .stat("floor", crate::bsde::REPRESENTATION_FLOOR * scale.max(1.0)),
        );
    }

    fn duality(&mut self) -> Result<()> {
        self.common_info();
        let (ens, filters) = self.ensemble(Measure::PTilde)?;
        let phys = self.physical()?;
        let control = self.control()?;
        let solved = self.solve(&control, &ens, &filters)?;
        let problem = Problem::new(self.model, &ens, &filters)?;
        let pp = match &phys {
            Some((pe, pf)) => Some(Problem::new(self.model, pe, pf)?),
            None => None,
        };
        let scale = self.terminal()?.max_abs().powi(2);
        let slack = self.cfg.checks.duality_slack * self.grid.dt() * scale;
        let cps = self.grid.quarter_checkpoints();
        let report = check_duality(&problem, &solved, &cps, pp.as_ref(), slack)?;
        self.info("cost", report.cost);
        for (k, c) in &report.cost_to_go {
            self.checks.push(
                Check::new(
                    format!("cost_to_go.k{k}"),
                    "J(U) = Ẽ[½D_t|Y_t(X_t) − S_t|² + ∫_t^T l dτ]",
                    c.passed(),
                )
                .stat("t", self.grid.t(*k))
                .estimate("lhs", &c.lhs)
                .estimate("rhs", &c.rhs)
                .estimate("difference", &c.difference)
                .stat("slack", c.slack),
            );
        }
        if let Some(c) = &report.plain_terminal {
            self.checks.push(
                Check::new("duality", "J(U) = ½E|F(X_T) − S_T|²", c.passed())
                    .estimate("lhs", &c.lhs)
                    .estimate("rhs", &c.rhs)
                    .estimate("difference", &c.difference)
                    .stat("slack", c.slack),
            );
        }
        if let Some(c) = &report.terminal_forms {
            self.checks.push(
                Check::new(
                    "terminal_forms",
                    "½Ẽ[D_T|F(X_T) − S_T|²] = ½E|F(X_T) − S_T|²",
                    c.passed(),
                )
                .estimate("lhs", &c.lhs)
                .estimate("rhs", &c.rhs)
                .estimate("difference", &c.difference),
            );
        }
        let rows = report.cost_to_go.clone();
        let grid = self.grid;
        self.trace("duality", |w| {
            writeln!(w, "k,t,lhs_mean,lhs_se,rhs_mean,rhs_se,diff_mean,diff_se")?;
            for (k, c) in &rows {
                writeln!(
                    w,
                    "{k},{},{},{},{},{},{},{}",
                    grid.t(*k),
                    c.lhs.mean,
                    c.lhs.se,
                    c.rhs.mean,
                    c.rhs.se,
                    c.difference.mean,
                    c.difference.se
                )?;
            }
            Ok(())
        })?;
        self.dump_bsde(&solved, &ens, &filters)
    }

    fn martingale(&mut self) -> Result<()> {
        self.common_info();
        let (ens, filters) = self.ensemble(Measure::PTilde)?;
        let control = self.control()?;
        let solved = self.solve(&control, &ens, &filters)?;
        let problem = Problem::new(self.model, &ens, &filters)?;
        let trace = check_martingale(&problem, &solved)?;
        let total = trace.total_increment();
        match self.cfg.control {
            ControlBlock::Optimal { shift: 0.0 } => {
                let dev = trace.max_deviation();
                self.checks.push(
                    Check::new(
                        "martingale",
                        "E[M_t] = E[M_0] under U = U*",
                        trace.is_martingale(),
                    )
                    .estimate("max_deviation", &dev),
                );
            }
            ControlBlock::Optimal { shift } => {
                let expected = -0.5 * shift * shift * self.grid.horizon();
                self.checks.push(
                    Check::new(
                        "perturbed_increment",
                        "E[M_T] − E[M_0] = −½c²T under U = U* + c",
                        total.within(expected, Z_SCORE, 0.0),
                    )
                    .estimate("increment", &total)
                    .stat("expected", expected),
                );
            }
            _ => {}
        }
        self.checks.push(
            Check::new(
                "supermartingale",
                "E[M_t] − E[M_s] ≤ 0 for s ≤ t",
                trace.is_supermartingale(),
            )
            .estimate("increment", &total),
        );
        let gap = trace.predicted_gap;
        let diff = total.mean + gap.mean;
        let se = total.se.hypot(gap.se);
        self.checks.push(
            Check::new(
                "integrated_drift",
                "E[M_T] − E[M_0] = −Ẽ∫½σ_t(1)(U − U*)² dt",
                diff.abs() <= Z_SCORE * se,
            )
            .estimate("increment", &total)
            .estimate("predicted_gap", &gap),
        );
        self.trace("martingale", |w| trace.write_csv(w))?;
        self.dump_bsde(&solved, &ens, &filters)
    }

    fn drift(&mut self) -> Result<()> {
        self.common_info();
        let (ens, filters) = self.ensemble(Measure::PTilde)?;
        let control = self.control()?;
        let solved = self.solve(&control, &ens, &filters)?;
        let problem = Problem::new(self.model, &ens, &filters)?;
        let report = check_drift_identity(&problem, &solved)?;
        let a = &report.aggregated;
        self.checks.push(
            Check::new(
                "drift_identity",
                "ΔM_k = −½σ_k(1)(U_k − U*_k)² dt + martingale increment",
                report.passed(),
            )
            .stat("slope", a.slope)
            .stat("slope_se", a.slope_se)
            .stat("intercept", a.intercept)
            .stat("intercept_se", a.intercept_se)
            .stat("r_squared", a.r_squared)
            .stat("compensated_slope", report.aggregated_compensated.slope)
            .stat("pooled_slope", report.pooled.slope)
            .stat("pooled_r_squared", report.pooled.r_squared)
            .estimate("integrated_difference", &report.integrated.difference),
        );
        self.trace("drift", |w| report.write_csv(w))
    }

    fn optimal_cost(&mut self) -> Result<()> {
        self.common_info();
        let (ens, filters) = self.ensemble(Measure::PTilde)?;
        let c = self.cfg.checks.perturbation;
        let candidates = [
            ("optimal".to_string(), Control::optimal(), true),
            ("zero".to_string(), Control::zero(&self.grid), false),
            (format!("optimal+{c}"), Control::optimal_shifted(c), false),
        ];
        let mut solved = Vec::with_capacity(candidates.len());
        for (_, control, _) in &candidates {
            solved.push(self.solve(control, &ens, &filters)?);
        }
        let problem = Problem::new(self.model, &ens, &filters)?;
        let list: Vec<(String, &SolvedBsde, bool)> = candidates
            .iter()
            .zip(&solved)
            .map(|((label, _, opt), s)| (label.clone(), s, *opt))
            .collect();
        let f = self.terminal()?;
        let report = check_optimal_cost(&problem, &f, &list)?;
        self.info("benchmark_direct", report.benchmark_direct);
        for cand in &report.candidates {
            let check = if cand.is_optimal {
                Check::new(
                    format!("cost.{}", cand.label),
                    "J(U*) = ½E|F(X_T) − π_T(F)|²",
                    cand.excess.within(0.0, Z_SCORE, 0.0),
                )
            } else {
                Check::new(
                    format!("cost.{}", cand.label),
                    "J(U) > ½E|F(X_T) − π_T(F)|²",
                    cand.exceeds(),
                )
            };
            self.checks.push(
                check
                    .estimate("cost", &cand.cost.total)
                    .estimate("benchmark", &report.benchmark)
                    .estimate("excess", &cand.excess)
                    .estimate("predicted_gap", &cand.predicted_gap),
            );
        }
        let perturbed = &report.candidates[2];
        let expected = 0.5 * c * c * self.grid.horizon();
        self.checks.push(
            Check::new(
                "perturbed_excess",
                "J(U* + c) − ½E|F(X_T) − π_T(F)|² = ½c²T",
                perturbed.excess.within(expected, Z_SCORE, 0.0),
            )
            .estimate("excess", &perturbed.excess)
            .stat("expected", expected),
        );
        let bench = report.benchmark;
        let rows = report.candidates.clone();
        self.trace("optimal_cost", |w| {
            writeln!(
                w,
                "label,cost_mean,cost_se,benchmark_mean,benchmark_se,excess_mean,excess_se,gap_mean,gap_se"
            )?;
            for r in &rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    r.label,
                    r.cost.total.mean,
                    r.cost.total.se,
                    bench.mean,
                    bench.se,
                    r.excess.mean,
                    r.excess.se,
                    r.predicted_gap.mean,
                    r.predicted_gap.se
                )?;
            }
            Ok(())
        })
    }

    fn value(&mut self) -> Result<()> {
        self.common_info();
        let (ens, filters) = self.ensemble(Measure::PTilde)?;
        let problem = Problem::new(self.model, &ens, &filters)?;
        let f = self.terminal()?;
        let k_check = self
            .cfg
            .checks
            .value_time
            .map_or(self.grid.n_steps(), |t| self.grid.index_of(t));
        let mut rows = Vec::with_capacity(self.grid.len());
        for k in 0..self.grid.len() {
            rows.push(value_function(&problem, Zeta::Fixed(&f), k)?);
        }
        let v = rows[k_check];
        self.checks.push(
            Check::new(
                "value_function",
                "½Ẽ[D_t|ζ(X_t) − π_t(ζ)|²] = ½Ẽ[σ_t(ζ²) − σ_t(ζ)π_t(ζ)]",
                v.agree(),
            )
            .stat("t", self.grid.t(k_check))
            .estimate("direct", &v.direct)
            .estimate("filter_form", &v.filter_form)
            .estimate("difference", &v.difference),
        );
        let grid = self.grid;
        self.trace("value", |w| {
            writeln!(w, "k,t,direct_mean,direct_se,filter_mean,filter_se")?;
            for r in &rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    r.k,
                    grid.t(r.k),
                    r.direct.mean,
                    r.direct.se,
                    r.filter_form.mean,
                    r.filter_form.se
                )?;
            }
            Ok(())
        })
    }
}
