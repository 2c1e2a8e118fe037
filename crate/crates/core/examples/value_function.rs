//! Evaluates the conditional-variance value function along time by two
//! estimators: the density-weighted squared error and the filter form.
//!
//! ```bash
//! cargo run --release --example value_function
//! ```

use dualfilter::dual::{value_function, Problem, Zeta};
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
    let ens = Ensemble::generate(&model, grid, 20_000, 51, Measure::PTilde)?;
    let filters = run_filters(&model, &ens)?;
    let problem = Problem::new(&model, &ens, &filters)?;

    let zeta = Function::new(vec![0.0, 1.0, 2.0])?;
    for k in (0..=grid.n_steps()).step_by(25) {
        let v = value_function(&problem, Zeta::Fixed(&zeta), k)?;
        println!(
            "t = {:.3}: direct {}, filter form {}, agree = {}",
            grid.t(k),
            v.direct,
            v.filter_form,
            v.agree()
        );
    }

    // ζ may depend on the observations up to t
    let k = grid.n_steps() / 2;
    let by_path = |i: usize| {
        let z = ens.paths[i].z[k];
        Function::new(vec![0.0, z, 2.0 * z]).expect("finite values")
    };
    let v = value_function(&problem, Zeta::PerPath(&by_path), k)?;
    println!("observation-dependent ζ at t = {:.2}: {}", grid.t(k), v.difference);
    Ok(())
}
