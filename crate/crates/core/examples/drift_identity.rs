//! Regresses the per-step increments of the value process on the predicted
//! drift `−½σ(1)(U − U*)² dt` for the zero control, at three step sizes.
//!
//! ```bash
//! cargo run --release --example drift_identity
//! ```

use dualfilter::bsde::{Control, RegressionConfig, SolvedBsde, TerminalCondition};
use dualfilter::dual::{check_drift_identity, Problem};
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
    let terminal = TerminalCondition::Deterministic(Function::new(vec![0.0, 1.0, 2.0])?);

    for n_steps in [50, 100, 200] {
        let grid = TimeGrid::new(model.horizon, n_steps)?;
        let ens = Ensemble::generate(&model, grid, 20_000, 31, Measure::PTilde)?;
        let filters = run_filters(&model, &ens)?;
        let problem = Problem::new(&model, &ens, &filters)?;
        let solved = SolvedBsde::solve(
            &model,
            &terminal,
            &Control::zero(&grid),
            &ens,
            &filters,
            &RegressionConfig::default(),
        )?;
        let r = check_drift_identity(&problem, &solved)?;
        println!(
            "dt = {:.3}: slope {:.4} ± {:.4}, R² {:.5}, intercept {:.2e} ± {:.2e}, |slope − 1| = {:.4}",
            grid.dt(),
            r.aggregated.slope,
            r.aggregated.slope_se,
            r.aggregated.r_squared,
            r.aggregated.intercept,
            r.aggregated.intercept_se,
            r.slope_bias()
        );
    }
    Ok(())
}
