use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use earshot::commands::{self, EvaluateArgs, PredictArgs, SweepArgs, TrainArgs};
use earshot::report::f6;

/// Intrusive intelligibility prediction from SFM layer features.
#[derive(Parser)]
#[command(name = "earshot", version)]
struct Cli {
    /// Overrides the seed of the synth spec / train config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fold training.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic planted-signal corpus.
    Synth {
        /// Synth spec (key = value); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Listener-level cross-validation; one checkpoint per fold.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        listeners: PathBuf,
        /// Model config (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training config (key = value).
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble predictions to CSV.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        listeners: PathBuf,
        /// Checkpoint files or training output directories.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Add one column per checkpoint.
        #[arg(long)]
        per_model: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE, stratified report and scene histogram.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        bin_width: f64,
        #[arg(long, default_value_t = 40.0)]
        tail_threshold: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer-window sweep table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        listeners: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> earshot::Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out } => {
            let m = commands::cmd_synth(config.as_deref(), &out, cli.seed)?;
            println!("{} utterances written to {}", m.records.len(), out.display());
        }
        Cmd::Train {
            manifest,
            listeners,
            config,
            train_config,
            folds,
            out,
        } => {
            let cks = commands::cmd_train(&TrainArgs {
                manifest,
                listeners,
                model_config: config,
                train_config,
                out,
                seed: cli.seed,
                jobs: cli.jobs,
                folds,
            })?;
            for c in cks {
                println!("fold {} best_epoch {} val_rmse {}", c.fold, c.best_epoch, f6(c.val_rmse));
            }
        }
        Cmd::Predict {
            manifest,
            listeners,
            checkpoints,
            per_model,
            out,
        } => {
            let r = commands::cmd_predict(&PredictArgs {
                manifest,
                listeners,
                checkpoints,
                out: out.clone(),
                per_model,
            })?;
            println!("{} predictions written to {}", r.len(), out.display());
        }
        Cmd::Evaluate {
            predictions,
            manifest,
            train_manifest,
            bin_width,
            tail_threshold,
            out,
        } => {
            let e = commands::cmd_evaluate(&EvaluateArgs {
                train_manifest,
                bin_width,
                tail_threshold,
                ..EvaluateArgs::new(predictions, manifest, out)
            })?;
            println!("rmse {} n {}", f6(e.rmse), e.n);
            if let Some(s) = e.strata {
                for r in s {
                    println!("{} rmse {} n {}", r.name, f6(r.pooled_rmse), r.n);
                }
            }
            println!("scene_tail_share {}", f6(e.scenes.tail_share));
        }
        Cmd::Sweep {
            config,
            manifest,
            listeners,
            out,
        } => {
            let t = commands::cmd_sweep(&SweepArgs {
                spec: config,
                manifest,
                listeners,
                out,
                seed: cli.seed,
            })?;
            match t.argmin() {
                Some(r) => println!(
                    "argmin window {} setup {} val_rmse {}",
                    r.window.display_label(),
                    r.setup.letter(),
                    f6(r.val_rmse.unwrap_or(f64::NAN))
                ),
                None => println!("argmin none: every cell failed"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EARSHOT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
