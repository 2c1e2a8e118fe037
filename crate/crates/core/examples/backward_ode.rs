//! Solves the dual backward equation for a deterministic control, where it
//! reduces to a linear ODE, and builds the forward estimator `S_t`.
//!
//! ```bash
//! cargo run --release --example backward_ode
//! ```

use dualfilter::bsde::{s_process, solve_backward_ode, Control};
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

    for (name, control) in [
        ("zero", Control::zero(&grid)),
        ("constant 0.5", Control::constant(&grid, 0.5)),
        ("ramp 0 → 1", Control::ramp(&grid, 0.0, 1.0)),
    ] {
        let Control::Deterministic(u) = &control else {
            unreachable!()
        };
        let sol = solve_backward_ode(&model, &f, u, &grid)?;
        println!("{name}:");
        for k in grid.quarter_checkpoints() {
            println!("  Y(t = {:.2}) = {:.6?}", grid.t(k), sol.y(k));
        }

        // S_T estimates F(X_T); its error is what the control pays for
        let ens = Ensemble::generate(&model, grid, 20_000, 1, Measure::P)?;
        let n = grid.n_steps();
        let mse: f64 = ens
            .paths
            .iter()
            .map(|p| {
                let s = s_process(sol.y(0), &model.prior, u, &p.z).expect("dimensions match");
                0.5 * (f[p.state(n)] - s.s[n]).powi(2)
            })
            .sum::<f64>()
            / ens.len() as f64;
        println!("  ½E|F(X_T) − S_T|² ≈ {mse:.5}");
    }
    Ok(())
}
