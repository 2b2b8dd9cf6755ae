//! Command-line front end for the few-shot robustness lab.

use clap::Parser;
use fewshot_lab::config::{self, Cli};

fn main() {
    let cli = Cli::parse();
    let run = match config::resolve(cli) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    match fewshot_lab::cli::execute(run) {
        Ok(outcome) => {
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!("run directory: {}", outcome.run_dir.display());
            println!(
                "plan {} — {} artifact(s)",
                &outcome.manifest.plan_hash[..16],
                outcome.manifest.artifacts.len()
            );
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
