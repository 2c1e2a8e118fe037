//! Traces the value process `M` under the optimal control (a martingale) and
//! under perturbed controls (strict supermartingales), and writes the trace.
//!
//! ```bash
//! cargo run --release --example martingale_trace
//! ```

use dualfilter::bsde::{Control, RegressionConfig, SolvedBsde, TerminalCondition};
use dualfilter::dual::{check_martingale, Problem};
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
    let terminal = TerminalCondition::Deterministic(Function::new(vec![0.0, 1.0, 2.0])?);
    let ens = Ensemble::generate(&model, grid, 10_000, 21, Measure::PTilde)?;
    let filters = run_filters(&model, &ens)?;
    let problem = Problem::new(&model, &ens, &filters)?;

    for control in [
        Control::optimal(),
        Control::optimal_shifted(0.5),
        Control::zero(&grid),
    ] {
        let solved = SolvedBsde::solve(
            &model,
            &terminal,
            &control,
            &ens,
            &filters,
            &RegressionConfig::default(),
        )?;
        let trace = check_martingale(&problem, &solved)?;
        println!(
            "{}: martingale = {}, supermartingale = {}",
            control.label(),
            trace.is_martingale(),
            trace.is_supermartingale()
        );
        for (k, inc) in trace.checkpoints.iter().zip(&trace.increments) {
            println!("  E[M_t] − E[M_0] at t = {:.2}: {inc}", grid.t(*k));
        }
        println!("  predicted E[M_0] − E[M_T]: {}", trace.predicted_gap);
        if control.label() == "optimal" {
            let mut out = Vec::new();
            trace.write_csv(&mut out)?;
            let text = String::from_utf8(out).expect("CSV is UTF-8");
            println!("  first rows of the trace:");
            for line in text.lines().take(4) {
                println!("    {line}");
            }
        }
    }
    Ok(())
}
