//! Seeded simulation of the joint process `(X, W, Z)` on a uniform grid,
//! under the physical measure `P` or the reference measure `P̃`, and the
//! change-of-measure density `D` (stored as `log D`).
//!
//! The hidden chain is sampled exactly (holding times and jump kernel) and
//! then read off at the grid points. All stochastic integrals are left-point
//! (Itô) sums on the grid.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{path_stream, StreamRole};
use crate::stats::{chunked_reduce, MeanEstimate, Moments};

/// Uniform grid `t_k = k·dt`, `k = 0..=n_steps`, on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument(
                "degenerate grid: n_steps must be at least 1".into(),
            ));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Index of the grid point closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt()).round() as usize).min(self.n_steps)
    }

    /// `{0, T/4, T/2, 3T/4, T}` snapped to the grid.
    pub fn quarter_checkpoints(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = (0..=4)
            .map(|q| self.index_of(self.horizon * q as f64 / 4.0))
            .collect();
        ks.dedup();
        ks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Measure {
    /// Physical measure: `dZ = h(X) dt + dW`.
    P,
    /// Reference measure: `Z` is a Brownian motion independent of `X`.
    PTilde,
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Measure::P => "P",
            Measure::PTilde => "P-tilde",
        })
    }
}

/// An exact jump of the hidden chain: time and post-jump (0-indexed) state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// One joint realization of `(X, W, Z, log D)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    x: Vec<u16>,
    pub jumps: Vec<Jump>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub log_d: Vec<f64>,
}

impl SamplePath {
    /// 0-indexed state at grid point `k`.
    #[inline]
    pub fn state(&self, k: usize) -> usize {
        self.x[k] as usize
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.x.iter().map(|&s| s as usize)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    #[inline]
    pub fn dz(&self, k: usize) -> f64 {
        self.z[k + 1] - self.z[k]
    }

    #[inline]
    pub fn d(&self, k: usize) -> f64 {
        self.log_d[k].exp()
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64], total: f64) -> usize {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Exact CTMC sample: initial state from the prior, Exponential holding
/// times, jump kernel `A(x,j)/(−A(x,x))`. States are reported at each grid
/// point by left-limit evaluation; absorbing states hold forever.
pub fn simulate_ctmc(
    model: &Model,
    grid: &TimeGrid,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<Jump>) {
    let a = &model.rates;
    let d = model.dim();
    let horizon = grid.horizon();
    let x0 = sample_categorical(rng, &model.prior, 1.0);
    let mut state = x0;
    let mut jumps = Vec::new();
    let mut t = 0.0;
    loop {
        let rate = a.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(rng);
        t += hold / rate;
        if t >= horizon {
            break;
        }
        let mut weights = a.row(state).to_vec();
        weights[state] = 0.0;
        debug_assert_eq!(weights.len(), d);
        state = sample_categorical(rng, &weights, rate);
        jumps.push(Jump { time: t, state });
    }

    (project_on_grid(x0, &jumps, grid), jumps)
}

/// Left-limit evaluation of a piecewise-constant path at the grid points.
fn project_on_grid(x0: usize, jumps: &[Jump], grid: &TimeGrid) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.len());
    let mut current = x0;
    let mut next = 0;
    for k in 0..grid.len() {
        let t = grid.t(k);
        while next < jumps.len() && jumps[next].time < t {
            current = jumps[next].state;
            next += 1;
        }
        out.push(current);
    }
    out
}

/// Observation and noise paths along a given state sequence.
///
/// Under `P`, `ΔW ~ N(0, dt)` and `ΔZ = h(x_k) dt + ΔW`; under `P̃`,
/// `ΔZ ~ N(0, dt)` and `W = Z − ∫ h(X) dt`.
pub fn simulate_observation(
    model: &Model,
    x: &[usize],
    grid: &TimeGrid,
    rng: &mut ChaCha8Rng,
    measure: Measure,
) -> (Vec<f64>, Vec<f64>) {
    let n = grid.n_steps();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut w = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n + 1);
    w.push(0.0);
    z.push(0.0);
    let mut drift = 0.0;
    let mut noise = 0.0;
    for k in 0..n {
        let xi: f64 = StandardNormal.sample(rng);
        drift += model.h[x[k]] * dt;
        noise += sq * xi;
        match measure {
            Measure::P => {
                w.push(noise);
                z.push(noise + drift);
            }
            Measure::PTilde => {
                z.push(noise);
                w.push(noise - drift);
            }
        }
    }
    (w, z)
}

/// The two equivalent accumulations of `log D_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityForms {
    /// `Σ_{j<k} [h(x_j) ΔZ_j − ½ h(x_j)² dt]`
    pub via_observation: Vec<f64>,
    /// `Σ_{j<k} [h(x_j) ΔW_j + ½ h(x_j)² dt]`
    pub via_noise: Vec<f64>,
}

impl LogDensityForms {
    /// Largest relative disagreement between the two forms.
    pub fn max_relative_gap(&self) -> f64 {
        self.via_observation
            .iter()
            .zip(&self.via_noise)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
            .fold(0.0, f64::max)
    }
}

/// Tolerance on `Z − W − ∫h(X)dt` and on the agreement of the two `log D` forms.
pub const INTEGRITY_TOL: f64 = 1e-9;

pub fn log_density_forms(
    model: &Model,
    x: &[usize],
    w: &[f64],
    z: &[f64],
    dt: f64,
) -> Result<LogDensityForms> {
    let n = z.len();
    if x.len() != n || w.len() != n {
        return Err(Error::DataIntegrity(format!(
            "path arrays disagree in length: x={}, w={}, z={}",
            x.len(),
            w.len(),
            n
        )));
    }
    let mut via_observation = Vec::with_capacity(n);
    let mut via_noise = Vec::with_capacity(n);
    via_observation.push(0.0);
    via_noise.push(0.0);
    let (mut lo, mut ln, mut drift) = (0.0, 0.0, 0.0);
    for k in 0..n - 1 {
        let h = model.h[x[k]];
        drift += h * dt;
        let mismatch = (z[k + 1] - w[k + 1]) - drift;
        if mismatch.abs() > INTEGRITY_TOL * (1.0 + z[k + 1].abs() + w[k + 1].abs()) {
            return Err(Error::DataIntegrity(format!(
                "observation drift mismatch {mismatch:e} at step {k}"
            )));
        }
        lo += h * (z[k + 1] - z[k]) - 0.5 * h * h * dt;
        ln += h * (w[k + 1] - w[k]) + 0.5 * h * h * dt;
        via_observation.push(lo);
        via_noise.push(ln);
    }
    Ok(LogDensityForms {
        via_observation,
        via_noise,
    })
}

/// `log D_{t_k}` along a path, cross-checked against the noise-driven form.
pub fn change_of_measure(
    model: &Model,
    x: &[usize],
    w: &[f64],
    z: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let forms = log_density_forms(model, x, w, z, dt)?;
    let gap = forms.max_relative_gap();
    if gap > INTEGRITY_TOL {
        return Err(Error::DataIntegrity(format!(
            "log-density forms disagree by {gap:e} (relative)"
        )));
    }
    Ok(forms.via_observation)
}

/// Simulates path `index` of the ensemble defined by `seed`.
pub fn simulate_path(
    model: &Model,
    grid: &TimeGrid,
    seed: u64,
    index: u64,
    measure: Measure,
) -> Result<SamplePath> {
    if model.dim() > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "state space too large for path storage: {}",
            model.dim()
        )));
    }
    let mut chain_rng = path_stream(seed, index, StreamRole::Chain);
    let mut noise_rng = path_stream(seed, index, StreamRole::Noise);
    let (x, jumps) = simulate_ctmc(model, grid, &mut chain_rng);
    let (w, z) = simulate_observation(model, &x, grid, &mut noise_rng, measure);
    let log_d = change_of_measure(model, &x, &w, &z, grid.dt())?;
    Ok(SamplePath {
        x: x.into_iter().map(|s| s as u16).collect(),
        jumps,
        w,
        z,
        log_d,
    })
}

/// A set of independent paths sharing one grid; path `i` depends only on `(seed, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub measure: Measure,
    pub seed: u64,
    pub paths: Vec<SamplePath>,
}

impl Ensemble {
    pub fn generate(
        model: &Model,
        grid: TimeGrid,
        n_paths: usize,
        seed: u64,
        measure: Measure,
    ) -> Result<Self> {
        let paths = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| simulate_path(model, &grid, seed, i, measure))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            measure,
            seed,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// `Ẽ[D_{t_k}]` at the given grid indices; each equals 1 under `P̃`.
    pub fn density_means(&self, indices: &[usize]) -> Result<Vec<(usize, MeanEstimate)>> {
        if self.measure != Measure::PTilde {
            return Err(Error::InvalidArgument(
                "density means are only normalized under P̃".into(),
            ));
        }
        if let Some(&k) = indices.iter().find(|&&k| k > self.grid.n_steps()) {
            return Err(Error::InvalidArgument(format!(
                "index {k} beyond grid end {}",
                self.grid.n_steps()
            )));
        }
        let m = chunked_reduce(
            self.len(),
            || vec![Moments::default(); indices.len()],
            |acc: &mut Vec<Moments>, i| {
                for (q, &k) in indices.iter().enumerate() {
                    acc[q].push(self.paths[i].d(k));
                }
            },
        );
        Ok(indices
            .iter()
            .zip(&m)
            .map(|(&k, s)| (k, s.estimate()))
            .collect())
    }

    /// Largest per-path relative gap between the two `log D` accumulations.
    pub fn log_density_gap(&self, model: &Model) -> Result<f64> {
        let dt = self.grid.dt();
        self.paths
            .par_iter()
            .map(|p| {
                let x: Vec<usize> = p.states().collect();
                log_density_forms(model, &x, &p.w, &p.z, dt).map(|f| f.max_relative_gap())
            })
            .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
    }

    /// Writes `path_id,k,t,x,w,z,log_d` rows (states 1-indexed) for the first
    /// `max_paths` paths.
    pub fn write_csv<W: Write>(&self, out: &mut W, max_paths: usize) -> Result<()> {
        writeln!(out, "path_id,k,t,x,w,z,log_d")?;
        for (i, p) in self.paths.iter().take(max_paths).enumerate() {
            for k in 0..p.len() {
                writeln!(
                    out,
                    "{i},{k},{},{},{},{},{}",
                    self.grid.t(k),
                    p.state(k) + 1,
                    p.w[k],
                    p.z[k],
                    p.log_d[k]
                )?;
            }
        }
        Ok(())
    }
}
