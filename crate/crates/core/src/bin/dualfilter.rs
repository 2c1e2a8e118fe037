use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualfilter::runner::{run_file, validate_file, RunOptions};

#[derive(Parser)]
#[command(name = "dualfilter", version, about = "Run and validate filtering-duality experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output.directory`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Master seed (overrides `mc.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config file without simulating.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            out,
            workers,
            seed,
        } => {
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = workers {
                pool = pool.num_threads(n);
            }
            if let Err(e) = pool.build_global() {
                eprintln!("error: cannot start worker pool: {e}");
                return ExitCode::from(2);
            }
            match run_file(&config, &RunOptions { out, seed }) {
                Ok(outcome) => {
                    let m = &outcome.manifest;
                    for c in &m.checks {
                        println!("{:<6} {}  [{}]", c.verdict, c.name, c.identity);
                    }
                    println!(
                        "verdict = {} ({})",
                        m.verdict(),
                        outcome.out_dir.join("manifest.txt").display()
                    );
                    m.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Validate { config } => match validate_file(&config) {
            Ok(diags) if diags.is_empty() => {
                println!("ok");
                0
            }
            Ok(diags) => {
                for d in &diags {
                    println!("{d}");
                }
                2
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
