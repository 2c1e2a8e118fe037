//! Drives the experiment runner from an in-memory config and prints the
//! manifest it writes.
//!
//! ```bash
//! cargo run --release --example run_config
//! ```

use dualfilter::config::ExperimentConfig;
use dualfilter::runner::{run, validate_text, RunOptions};

const CONFIG: &str = r#"
experiment = "duality-check"

[model]
d = 3
A = [-2.0, 1.0, 1.0, 1.0, -3.0, 2.0, 2.0, 2.0, -4.0]
h = [-1.0, 0.0, 1.0]
prior = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]
T = 1.0

[grid]
n_steps = 100

[mc]
n_paths = 10000
seed = 7

[control]
kind = "ramp"
from = 0.0
to = 1.0

[terminal]
kind = "function"
values = [0.0, 1.0, 2.0]

[checks]
physical_paths = 10000

[output]
dump_paths = 5
"#;

fn main() -> dualfilter::Result<()> {
    let broken = CONFIG.replace("prior = [0.3333333333333333,", "prior = [0.2333333333333333,");
    for d in validate_text(&broken) {
        println!("diagnostic: {d}");
    }

    let cfg = ExperimentConfig::parse(CONFIG)?;
    let dir = std::env::temp_dir().join("dualfilter-run-config");
    let outcome = run(
        &cfg,
        CONFIG,
        &RunOptions {
            out: Some(dir.clone()),
            seed: None,
        },
    )?;
    print!("{}", std::fs::read_to_string(dir.join("manifest.txt"))?);
    println!("exit code would be {}", outcome.manifest.exit_code());
    Ok(())
}
