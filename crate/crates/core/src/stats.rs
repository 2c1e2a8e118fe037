//! Order-deterministic Monte Carlo reductions.
//!
//! Paths are always reduced in fixed-size chunks: each chunk is folded
//! sequentially, and chunk summaries are merged in index order. The result
//! depends only on the data, never on the worker count.

use rayon::prelude::*;

/// Number of paths folded sequentially before a merge.
pub const CHUNK: usize = 1024;

/// Running mean and centered second moment (Welford), mergeable (Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> MeanEstimate {
        MeanEstimate {
            mean: self.mean,
            se: (self.variance() / self.n.max(1) as f64).sqrt(),
            n: self.n,
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl MeanEstimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            se: 0.0,
            n: 0,
        }
    }

    /// Difference of two independent estimates.
    pub fn minus_independent(&self, other: &MeanEstimate) -> MeanEstimate {
        MeanEstimate {
            mean: self.mean - other.mean,
            se: self.se.hypot(other.se),
            n: self.n.min(other.n),
        }
    }

    /// `|mean − target| ≤ k·se + slack`
    pub fn within(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + slack
    }
}

impl std::fmt::Display for MeanEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6e} ± {:.3e}", self.mean, self.se)
    }
}

/// Summary that can absorb one path's contribution and be merged.
pub trait Accumulator: Send + Sized {
    fn merge(&mut self, other: Self);
}

impl Accumulator for Moments {
    fn merge(&mut self, other: Self) {
        Moments::merge(self, &other);
    }
}

impl Accumulator for Vec<Moments> {
    fn merge(&mut self, other: Self) {
        if self.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.merge(b);
        }
    }
}

/// Folds `fold(acc, i)` over `0..n` in fixed chunks (in parallel), merging
/// chunk summaries in index order.
pub fn chunked_reduce<A, I, F>(n: usize, init: I, fold: F) -> A
where
    A: Accumulator,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
{
    let chunks: Vec<A> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for c in chunks {
        total.merge(c);
    }
    total
}

/// Fallible variant of [`chunked_reduce`]; the first error in index order wins.
pub fn try_chunked_reduce<A, I, F, E>(n: usize, init: I, fold: F) -> Result<A, E>
where
    A: Accumulator,
    E: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<(), E> + Sync,
{
    let chunks: Vec<Result<A, E>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for c in chunks {
        total.merge(c?);
    }
    Ok(total)
}

/// Ordinary least squares `y ≈ intercept + slope·x` with classical standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub r_squared: f64,
    pub n: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let s2 = if n > 2 { sse / (nf - 2.0) } else { 0.0 };
    let slope_se = if sxx > 0.0 {
        (s2 / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    let intercept_se = (s2 * (1.0 / nf + mx * mx / sxx)).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LineFit {
        slope,
        intercept,
        slope_se,
        intercept_se,
        r_squared,
        n,
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn merged_moments_match_single_pass() {
        let xs: Vec<f64> = (0..5000)
            .map(|i| ((i * 37) % 101) as f64 * 0.1 - 3.0)
            .collect();
        let whole = Moments::from_slice(&xs);
        let mut merged = Moments::from_slice(&xs[..1234]);
        merged.merge(&Moments::from_slice(&xs[1234..]));
        assert_relative_eq!(whole.mean, merged.mean, epsilon = 1e-12);
        assert_relative_eq!(whole.variance(), merged.variance(), epsilon = 1e-10);
    }

    #[test]
    fn chunked_reduce_is_worker_count_invariant() {
        let f = |m: &mut Moments, i: usize| m.push((i as f64).sin());
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| chunked_reduce(10_000, Moments::default, f));
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| chunked_reduce(10_000, Moments::default, f));
        assert_eq!(one, four);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let fit = fit_line(&x, &y);
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, -1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
    }
}
