//! Experiment driver for multimodal neural processes: argument parsing,
//! dataset construction, the commands and their artifacts.

pub mod args;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod svg;

use std::fs;

use args::{Cli, Command};
use commands::{ablate, eval_run, grid, load_config, load_run, noise_sweep, ood, resolve, train_run, write_grid};
pub use error::{CliError, Result};

/// Runs one parsed command and returns a short human-readable summary.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(a) => {
            let config = load_config(&a.config)?;
            let dir = resolve(&a.out.unwrap_or_else(|| format!("train-{}", &config.hash()[..12]).into()));
            let s = train_run(&config, &dir)?;
            Ok(format!(
                "trained {} epochs into {}\ntest accuracy {:.4}, ECE {:.4}, NLL {:.4}",
                s.epochs.len(),
                dir.display(),
                s.eval.accuracy,
                s.eval.ece,
                s.eval.nll
            ))
        }
        Command::Eval(a) => {
            let dir = resolve(&a.run);
            let run = load_run(&dir)?;
            let s = eval_run(&run, &dir)?;
            Ok(format!("test accuracy {:.4}, ECE {:.4}, NLL {:.4}", s.accuracy, s.ece, s.nll))
        }
        Command::NoiseSweep(a) => {
            let dir = resolve(&a.run);
            let run = load_run(&dir)?;
            let rows = noise_sweep(&run.model, &run.splits.test, run.config.seed)?;
            commands::write_noise_sweep(&rows, &dir.join(commands::NOISE_FILE))?;
            Ok(format!("mean accuracy over the sweep {:.4}", commands::mean_accuracy(&rows)))
        }
        Command::Grid(a) => {
            let dir = resolve(&a.run);
            let run = load_run(&dir)?;
            let out = grid(&run, a.nx, a.ny, &a.probes)?;
            write_grid(&out, &run, &dir, a.nx, a.ny, a.svg)?;
            Ok(format!("wrote {} grid points and {} probes", out.points.rows(), out.probes.len()))
        }
        Command::Ood(a) => {
            let dir = resolve(&a.run);
            let run = load_run(&dir)?;
            let report = ood(&run, a.shift, &a.ood_features)?;
            commands::write_report(&report, &dir)?;
            Ok(format!("AUROC (entropy) {:.4}", report.auroc_entropy))
        }
        Command::Ablate(a) => {
            let config = load_config(&a.config)?;
            let out = resolve(&a.out.unwrap_or_else(|| format!("ablate-{}", a.axis.name()).into()));
            fs::create_dir_all(&out)?;
            let rows = ablate(a.axis, &config, &out)?;
            let lines: Vec<String> = rows
                .iter()
                .map(|r| format!("{:<20} accuracy {:.4}", r.variant, r.accuracy))
                .collect();
            Ok(lines.join("\n"))
        }
    }
}
