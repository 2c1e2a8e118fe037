//! Runs the unnormalized filter with each time-stepping scheme and compares
//! the filter with simpler estimators of the hidden state.
//!
//! ```bash
//! cargo run --release --example zakai_filter
//! ```

use dualfilter::filter::{
    minimum_variance_witness, run_filters_with, run_zakai_with, ZakaiScheme,
};
use dualfilter::model::{Function, Model, ProbVector, RateMatrix};
use dualfilter::pathsim::{Ensemble, Measure, TimeGrid};

fn main() -> dualfilter::Result<()> {
    let rates = RateMatrix::from_rows(&[
        vec![-2.0, 1.0, 1.0],
        vec![1.0, -3.0, 2.0],
        vec![2.0, 2.0, -4.0],
    ])?;
    let model = Model::new(
        rates.clone(),
        Function::new(vec![-1.0, 0.0, 1.0])?,
        ProbVector::uniform(3),
        1.0,
    )?;
    let grid = TimeGrid::new(model.horizon, 200)?;
    let n = grid.n_steps();

    let ens = Ensemble::generate(&model, grid, 1, 3, Measure::P)?;
    let path = &ens.paths[0];
    println!("hidden state at T: {}", path.state(n) + 1);
    for scheme in [
        ZakaiScheme::EulerMaruyama,
        ZakaiScheme::Milstein,
        ZakaiScheme::Splitting,
    ] {
        let fp = run_zakai_with(&model, &path.z, &grid, scheme)?;
        println!(
            "{scheme:?}: π_T = {:.4?}, log σ_T(1) = {:.4}",
            fp.pi(n),
            fp.log_mass(n)
        );
    }

    // without observations the filter is the propagated prior
    let blind = Model::new(
        rates,
        Function::constant(3, 0.0),
        ProbVector::uniform(3),
        1.0,
    )?;
    let fp = run_zakai_with(&blind, &path.z, &grid, ZakaiScheme::Splitting)?;
    println!(
        "h ≡ 0: π_T = {:.6?}, exp(AᵀT)μ = {:.6?}",
        fp.pi(n),
        blind.marginal(1.0)
    );

    let ens = Ensemble::generate(&model, grid, 20_000, 4, Measure::P)?;
    let filters = run_filters_with(&model, &ens, ZakaiScheme::Splitting)?;
    let f = [0.0, 1.0, 2.0];
    let cmp = minimum_variance_witness(&model, &ens, &filters, &f)?;
    println!("mean-square error for f = {f:?}:");
    println!("  filter      {}", cmp.filter);
    println!("  prior mean  {}", cmp.prior_mean);
    println!("  a + b·Z_T   {}", cmp.linear_in_z);
    Ok(())
}
