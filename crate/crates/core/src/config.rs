//! Experiment configuration: strict TOML with named blocks.
//!
//! ```toml
//! experiment = "duality-check"
//!
//! [model]
//! d = 3
//! A = [-2.0, 1.0, 1.0,  1.0, -3.0, 2.0,  2.0, 2.0, -4.0]   # row-major
//! h = [-1.0, 0.0, 1.0]
//! prior = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]
//! T = 1.0
//!
//! [grid]
//! n_steps = 200
//!
//! [mc]
//! n_paths = 100000
//! seed = 20240601
//!
//! [control]
//! kind = "zero"            # zero | constant | ramp | values | optimal
//!
//! [terminal]
//! kind = "function"
//! values = [0.0, 1.0, 2.0]
//!
//! [output]
//! directory = "out"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::bsde::{Control, RegressionConfig, TargetScheme, TerminalCondition};
use crate::error::{Error, Result};
use crate::model::{Function, Model, ProbVector, RateMatrix, SIMPLEX_TOL};
use crate::pathsim::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Filter,
    BsdeSolve,
    DualityCheck,
    MartingaleCheck,
    DriftCheck,
    OptimalCost,
    ValueFunction,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Filter => "filter",
            ExperimentKind::BsdeSolve => "bsde-solve",
            ExperimentKind::DualityCheck => "duality-check",
            ExperimentKind::MartingaleCheck => "martingale-check",
            ExperimentKind::DriftCheck => "drift-check",
            ExperimentKind::OptimalCost => "optimal-cost",
            ExperimentKind::ValueFunction => "value-function",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub d: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub h: Vec<f64>,
    pub prior: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlBlock {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    Ramp {
        from: f64,
        to: f64,
    },
    /// One value per grid point.
    Values {
        values: Vec<f64>,
    },
    Optimal {
        #[serde(default)]
        shift: f64,
    },
}

impl ControlBlock {
    pub fn build(&self, grid: &TimeGrid) -> Result<Control> {
        Ok(match self {
            ControlBlock::Zero => Control::zero(grid),
            ControlBlock::Constant { value } => Control::constant(grid, *value),
            ControlBlock::Ramp { from, to } => Control::ramp(grid, *from, *to),
            ControlBlock::Values { values } => {
                if values.len() != grid.len() {
                    return Err(Error::Config(format!(
                        "control.values has {} entries, grid has {} points",
                        values.len(),
                        grid.len()
                    )));
                }
                Control::Deterministic(values.clone())
            }
            ControlBlock::Optimal { shift } => Control::optimal_shifted(*shift),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalBlock {
    Function { values: Vec<f64> },
}

impl TerminalBlock {
    pub fn values(&self) -> &[f64] {
        match self {
            TerminalBlock::Function { values } => values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionBlock {
    pub degree: usize,
    pub picard_iterations: usize,
    pub centered_v: bool,
    pub scheme: String,
}

impl Default for RegressionBlock {
    fn default() -> Self {
        let d = RegressionConfig::default();
        Self {
            degree: d.degree,
            picard_iterations: d.picard_iterations,
            centered_v: d.centered_v,
            scheme: "one-step".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksBlock {
    /// Constant added to the optimal control for the perturbed candidate.
    pub perturbation: f64,
    /// Time at which the value function is evaluated.
    pub value_time: Option<f64>,
    /// Paths in the ensemble used for the plain terminal form of the
    /// duality check (simulated under `P` with an independent seed).
    pub physical_paths: usize,
    /// Absolute allowance, as a multiple of `dt·‖F‖²∞`, added to `3·SE` in
    /// the duality check.
    pub duality_slack: f64,
}

impl Default for ChecksBlock {
    fn default() -> Self {
        Self {
            perturbation: 0.5,
            value_time: None,
            physical_paths: 0,
            duality_slack: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub directory: PathBuf,
    /// Subset of `["csv"]`; empty writes only the manifest.
    pub formats: Vec<String>,
    /// Number of paths written to per-path CSV dumps.
    pub dump_paths: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec!["csv".into()],
            dump_paths: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelBlock,
    pub grid: GridBlock,
    pub mc: McBlock,
    #[serde(default)]
    pub control: ControlBlock,
    pub terminal: TerminalBlock,
    #[serde(default)]
    pub regression: RegressionBlock,
    #[serde(default)]
    pub checks: ChecksBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

pub const MIN_REGRESSION_PATHS: usize = 1000;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    /// Every violated invariant, without simulating anything.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |loc: &str, msg: String| {
            out.push(Diagnostic {
                location: loc.to_string(),
                message: msg,
            })
        };
        let m = &self.model;
        let d = m.d;
        if d < 2 {
            push(
                "model.d",
                format!("state space needs at least 2 states, got {d}"),
            );
        }
        if m.a.len() != d * d {
            push(
                "model.A",
                format!("expected {} entries (d·d), got {}", d * d, m.a.len()),
            );
        } else {
            for i in 0..d {
                let row = &m.a[i * d..(i + 1) * d];
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        push("model.A", format!("A({},{}) is not finite", i + 1, j + 1));
                    } else if i != j && v < 0.0 {
                        push(
                            "model.A",
                            format!(
                                "off-diagonal entry A({},{}) = {v} is negative",
                                i + 1,
                                j + 1
                            ),
                        );
                    }
                }
                let sum: f64 = row.iter().sum();
                let scale = row.iter().map(|v| v.abs()).fold(1.0, f64::max);
                if sum.abs() > 1e-9 * scale {
                    push(
                        "model.A",
                        format!("row {} sums to {sum}, expected 0", i + 1),
                    );
                }
            }
        }
        if m.h.len() != d {
            push(
                "model.h",
                format!("expected {d} entries, got {}", m.h.len()),
            );
        }
        if m.h.iter().any(|v| !v.is_finite()) {
            push("model.h", "entries must be finite".into());
        }
        if m.prior.len() != d {
            push(
                "model.prior",
                format!("expected {d} entries, got {}", m.prior.len()),
            );
        }
        if let Some(i) = m.prior.iter().position(|&p| p < 0.0 || !p.is_finite()) {
            push(
                "model.prior",
                format!("entry {} = {} is not a probability", i + 1, m.prior[i]),
            );
        }
        let total: f64 = m.prior.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL.max(1e-9) {
            push(
                "model.prior",
                format!("not on the simplex: entries sum to {total}"),
            );
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            push(
                "model.T",
                format!("horizon must be positive and finite, got {}", m.horizon),
            );
        }
        if self.grid.n_steps == 0 {
            push(
                "grid.n_steps",
                "degenerate grid: n_steps must be at least 1".into(),
            );
        }
        if self.mc.n_paths == 0 {
            push("mc.n_paths", "at least one path is required".into());
        }
        let needs_regression = matches!(self.control, ControlBlock::Optimal { .. })
            && matches!(
                self.experiment,
                ExperimentKind::BsdeSolve
                    | ExperimentKind::DualityCheck
                    | ExperimentKind::MartingaleCheck
            )
            || self.experiment == ExperimentKind::OptimalCost;
        if needs_regression && self.mc.n_paths < MIN_REGRESSION_PATHS {
            push(
                "mc.n_paths",
                format!(
                    "the regression solver needs at least {MIN_REGRESSION_PATHS} paths, got {}",
                    self.mc.n_paths
                ),
            );
        }
        if self.experiment == ExperimentKind::DriftCheck
            && matches!(self.control, ControlBlock::Optimal { .. })
        {
            push(
                "control.kind",
                "drift-check needs a deterministic control".into(),
            );
        }
        match &self.control {
            ControlBlock::Values { values } if values.len() != self.grid.n_steps + 1 => push(
                "control.values",
                format!(
                    "expected {} entries (one per grid point), got {}",
                    self.grid.n_steps + 1,
                    values.len()
                ),
            ),
            _ => {}
        }
        if self.terminal.values().len() != d {
            push(
                "terminal.values",
                format!("expected {d} entries, got {}", self.terminal.values().len()),
            );
        }
        if self.regression.picard_iterations == 0 {
            push("regression.picard_iterations", "must be at least 1".into());
        }
        if !["one-step", "multi-step"].contains(&self.regression.scheme.as_str()) {
            push(
                "regression.scheme",
                format!(
                    "unknown scheme {:?} (one-step | multi-step)",
                    self.regression.scheme
                ),
            );
        }
        if let Some(t) = self.checks.value_time {
            if !(0.0..=m.horizon).contains(&t) {
                push("checks.value_time", format!("{t} outside [0, T]"));
            }
        }
        if self.checks.duality_slack < 0.0 {
            push("checks.duality_slack", "must be nonnegative".into());
        }
        for f in &self.output.formats {
            if f != "csv" {
                push("output.formats", format!("unknown format {f:?}"));
            }
        }
        out
    }

    fn ensure_valid(&self) -> Result<()> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                diags
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        self.ensure_valid()?;
        let m = &self.model;
        Model::new(
            RateMatrix::from_row_major(m.d, m.a.clone())?,
            Function::new(m.h.clone())?,
            ProbVector::new(m.prior.clone())?,
            m.horizon,
        )
    }

    pub fn build_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.model.horizon, self.grid.n_steps)
    }

    pub fn build_terminal(&self) -> Result<Function> {
        Function::new(self.terminal.values().to_vec())
    }

    pub fn terminal_condition(&self) -> Result<TerminalCondition> {
        Ok(TerminalCondition::Deterministic(self.build_terminal()?))
    }

    pub fn regression_config(&self) -> RegressionConfig {
        RegressionConfig {
            degree: self.regression.degree,
            picard_iterations: self.regression.picard_iterations,
            centered_v: self.regression.centered_v,
            scheme: if self.regression.scheme == "multi-step" {
                TargetScheme::MultiStep
            } else {
                TargetScheme::OneStep
            },
            min_paths: MIN_REGRESSION_PATHS,
            ..RegressionConfig::default()
        }
    }

    pub fn writes_csv(&self) -> bool {
        self.output.formats.iter().any(|f| f == "csv")
    }
}

/// Hex SHA-256 of the configuration text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
