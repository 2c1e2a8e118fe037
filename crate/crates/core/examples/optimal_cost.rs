//! Compares the dual cost of the optimal feedback control with the optimal
//! mean-square error, and with the costs of suboptimal controls.
//!
//! ```bash
//! cargo run --release --example optimal_cost
//! ```

use dualfilter::bsde::{Control, RegressionConfig, SolvedBsde, TerminalCondition};
use dualfilter::dual::{check_optimal_cost, Problem};
use dualfilter::filter::run_filters;
use dualfilter::model::{Function, Model, ProbVector, RateMatrix};
use dualfilter::pathsim::{Ensemble, Measure, TimeGrid};

fn main() -> dualfilter::Result<()> {
    let model = Model::new(
        RateMatrix::from_rows(&[
            vec![-2.0, 1.0, 1.0],
            vec![1.0, -3.0, 2.0],
            vec![2.0, 2.0, -4.0],
        ])?,
        Function::new(vec![-1.0, 0.0, 1.0])?,
        ProbVector::uniform(3),
        1.0,
    )?;
    let grid = TimeGrid::new(model.horizon, 200)?;
    let f = Function::new(vec![0.0, 1.0, 2.0])?;
    let terminal = TerminalCondition::Deterministic(f.clone());
    let ens = Ensemble::generate(&model, grid, 10_000, 41, Measure::PTilde)?;
    let filters = run_filters(&model, &ens)?;
    let problem = Problem::new(&model, &ens, &filters)?;
    let config = RegressionConfig::default();

    let controls = [
        (Control::optimal(), true),
        (Control::zero(&grid), false),
        (Control::optimal_shifted(0.5), false),
    ];
    let mut solved = Vec::new();
    for (c, _) in &controls {
        solved.push(SolvedBsde::solve(&model, &terminal, c, &ens, &filters, &config)?);
    }
    let candidates: Vec<_> = controls
        .iter()
        .zip(&solved)
        .map(|((c, opt), s)| (c.label(), s, *opt))
        .collect();
    let report = check_optimal_cost(&problem, &f, &candidates)?;
    println!("½E|F(X_T) − π_T(F)|² = {}", report.benchmark);
    for c in &report.candidates {
        println!(
            "{:>12}: J = {}, excess = {}, predicted ∫½σ(1)(U − U*)² = {}",
            c.label, c.cost.total, c.excess, c.predicted_gap
        );
    }
    println!("all comparisons hold: {}", report.passed());
    Ok(())
}
