use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panelcap::commands::{self, EvalArgs, InferArgs, Outcome, SynthArgs, TrainArgs};
use panelcap::report;

/// Structured panel captioning and caption-conditioned panel detection.
///
/// Exit status: 0 on success, 2 when the command finished with warnings
/// (skipped records, ignored config keys, missing predictions), 1 on error.
#[derive(Parser)]
#[command(name = "panelcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic compound-figure dataset.
    Synth(SynthArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Caption and detect panels with a checkpoint.
    Infer(InferArgs),
    /// Caption metrics under occurrence-level alignment.
    EvalCap(EvalArgs),
    /// Panel detection mAP.
    EvalDet(EvalArgs),
}

fn finish<T>(o: Outcome<T>) -> ExitCode {
    for w in &o.warnings {
        eprintln!("warning: {w}");
    }
    if o.warnings.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: Cli) -> panelcap::Result<ExitCode> {
    Ok(match cli.command {
        Command::Synth(a) => {
            let o = commands::synth(&a)?;
            report::write_stats(std::io::stdout().lock(), &o.value, a.format)?;
            finish(o)
        }
        Command::Train(a) => {
            let resolved = a.resolve()?;
            eprintln!("config {}", serde_json::to_string(&resolved.config)?);
            let o = commands::train(&a)?;
            if let Some(l) = o.value.logs.last() {
                eprintln!(
                    "stage {} done: {} steps, final loss {:.4}, wrote {}",
                    a.stage,
                    o.value.logs.len(),
                    l.loss,
                    o.value.checkpoint.display()
                );
            }
            finish(o)
        }
        Command::Infer(a) => {
            let o = commands::infer_cmd(&a)?;
            eprintln!("wrote {} predictions to {}", o.value.len(), a.out.display());
            finish(o)
        }
        Command::EvalCap(a) => finish(commands::eval_cap(&a)?),
        Command::EvalDet(a) => finish(commands::eval_det(&a)?),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
