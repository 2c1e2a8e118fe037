//! Solves the dual backward equation under the optimal feedback control by
//! least-squares regression on the filter, and cross-checks the regression
//! solver against the exact ODE solution for a deterministic control.
//!
//! ```bash
//! cargo run --release --example regression_bsde
//! ```

use dualfilter::bsde::{
    solve_backward_ode, solve_regression, Control, RegressionConfig, TerminalCondition,
};
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
    let grid = TimeGrid::new(model.horizon, 100)?;
    let f = Function::new(vec![0.0, 1.0, 2.0])?;
    let terminal = TerminalCondition::Deterministic(f.clone());
    let ens = Ensemble::generate(&model, grid, 10_000, 5, Measure::PTilde)?;
    let filters = run_filters(&model, &ens)?;
    let config = RegressionConfig::default();

    let ramp = Control::ramp(&grid, 0.0, 1.0);
    let Control::Deterministic(u) = &ramp else {
        unreachable!()
    };
    let ode = solve_backward_ode(&model, &f, u, &grid)?;
    let reg = solve_regression(&model, &terminal, &ramp, &ens, &filters, &config)?;
    let mut err: f64 = 0.0;
    for (p, fp) in ens.paths.iter().zip(&filters).take(1000) {
        let sol = reg.path_solution(&model, fp, &p.z);
        for k in 0..grid.len() {
            for (a, b) in sol.y(k).iter().zip(ode.y(k)) {
                err = err.max((a - b).abs());
            }
        }
    }
    println!("ramp control: max |Y_regression − Y_ode| = {err:.2e}");

    let reg = solve_regression(&model, &terminal, &Control::optimal(), &ens, &filters, &config)?;
    println!("optimal control: {:#?}", reg.diagnostics);
    let n = grid.n_steps();
    for (p, fp) in ens.paths.iter().zip(&filters).take(3) {
        let sol = reg.path_solution(&model, fp, &p.z);
        println!(
            "  Y_0 = {:.4?}, U_0 = {:.4}, U_(T/2) = {:.4}",
            sol.y(0),
            sol.u(0),
            sol.u(n / 2)
        );
    }
    Ok(())
}
