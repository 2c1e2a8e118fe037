//! Simulates the hidden chain and its observation under both measures and
//! checks the change-of-measure density.
//!
//! ```bash
//! cargo run --release --example simulate_paths
//! ```

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

    let reference = Ensemble::generate(&model, grid, 20_000, 7, Measure::PTilde)?;
    println!("Ẽ[D_t] (should be 1):");
    for (k, est) in reference.density_means(&grid.quarter_checkpoints())? {
        println!("  t = {:.2}: {est}", grid.t(k));
    }
    println!(
        "largest relative gap between the two log D forms: {:.2e}",
        reference.log_density_gap(&model)?
    );

    let physical = Ensemble::generate(&model, grid, 20_000, 8, Measure::P)?;
    let n = grid.n_steps();
    let mut occupation = [0usize; 3];
    for p in &physical.paths {
        occupation[p.state(n)] += 1;
    }
    let marginal = model.marginal(model.horizon);
    println!("law of X_T: simulated vs exp(AᵀT)μ");
    for x in 0..3 {
        println!(
            "  x = {}: {:.4} vs {:.4}",
            x + 1,
            occupation[x] as f64 / physical.len() as f64,
            marginal[x]
        );
    }

    let p = &physical.paths[0];
    println!("path 0: {} jumps, Z_T = {:.4}", p.jumps.len(), p.z[n]);
    Ok(())
}
