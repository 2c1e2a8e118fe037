//! Checks that the dual control cost equals the mean-square error of the
//! estimator it induces, at the terminal time and as a cost-to-go.
//!
//! ```bash
//! cargo run --release --example duality_check
//! ```

use dualfilter::bsde::{Control, RegressionConfig, SolvedBsde, TerminalCondition};
use dualfilter::dual::{check_duality, Problem};
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

    let ens = Ensemble::generate(&model, grid, 20_000, 11, Measure::PTilde)?;
    let filters = run_filters(&model, &ens)?;
    let phys = Ensemble::generate(&model, grid, 20_000, 12, Measure::P)?;
    let phys_filters = run_filters(&model, &phys)?;
    let problem = Problem::new(&model, &ens, &filters)?;
    let physical = Problem::new(&model, &phys, &phys_filters)?;
    let slack = 0.05 * grid.dt() * f.max_abs().powi(2);

    for control in [
        Control::zero(&grid),
        Control::constant(&grid, 0.5),
        Control::ramp(&grid, 0.0, 1.0),
    ] {
        let solved = SolvedBsde::solve(
            &model,
            &terminal,
            &control,
            &ens,
            &filters,
            &RegressionConfig::default(),
        )?;
        let report = check_duality(
            &problem,
            &solved,
            &grid.quarter_checkpoints(),
            Some(&physical),
            slack,
        )?;
        println!("{}: {}", control.label(), report.cost);
        for (k, c) in &report.cost_to_go {
            println!("  cost-to-go at t = {:.2}: {c}", grid.t(*k));
        }
        if let Some(c) = &report.plain_terminal {
            println!("  J(U) vs ½E|F(X_T) − S_T|²: {c}");
        }
    }
    Ok(())
}
