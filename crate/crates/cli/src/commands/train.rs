use std::path::PathBuf;

use clap::Args;
use ttm_core::training::{smoothed_endpoints, Precision, TrainStatus};
use ttm_core::unet::{Checkpoint, UNet};
use ttm_core::Scalar;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::{load_dataset, train_run};

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Validate the configuration and print the parameter count, then exit
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run directory [default: config `output_dir`, else $TTM_OUTPUT_ROOT/runs/<name>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress per-validation progress lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub parameter_count: usize,
    pub final_step: u64,
    pub best_step: Option<u64>,
}

pub fn run(args: &TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    let parameter_count = cfg.model.parameter_count();
    let run_dir = cfg.run_dir();
    if args.dry_run {
        println!("configuration ok");
        println!("parameters: {parameter_count}");
        return Ok(TrainSummary {
            run_dir,
            parameter_count,
            final_step: 0,
            best_step: None,
        });
    }
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(&cfg, args),
        Precision::F64 => run_typed::<f64>(&cfg, args),
    }
}

fn run_typed<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> CliResult<TrainSummary> {
    let ds = load_dataset(cfg)?;
    let resume = args.resume.as_deref().map(Checkpoint::<T>::load).transpose()?;
    let run_dir = cfg.run_dir();
    let quiet = args.quiet;
    let mut progress = |r: &ttm_core::training::MetricRecord| {
        if !quiet {
            eprintln!(
                "step {:>7}  loss {:.5}  fad {}  kl {}",
                r.step,
                r.loss,
                fmt_opt(r.fad),
                fmt_opt(r.kl)
            );
        }
    };
    let outcome = train_run::<T>(cfg, &ds, &run_dir, resume, &mut progress)?;
    if let TrainStatus::Diverged { step } = outcome.status {
        return Err(CliError::Runtime(format!(
            "training diverged at step {step}; last good checkpoint is step {}",
            outcome.last.step
        )));
    }
    if !quiet {
        if let Some((first, last)) = smoothed_endpoints(&outcome.loss_history, 100) {
            eprintln!("loss {first:.4} -> {last:.4}; conditions dropped {:.3}", outcome.null_fraction());
        }
    }
    let model = UNet::new(outcome.last.config.clone(), outcome.last.weights.clone())?;
    println!("run directory: {}", run_dir.display());
    Ok(TrainSummary {
        run_dir,
        parameter_count: model.parameter_count(),
        final_step: outcome.last.step,
        best_step: outcome.best.as_ref().map(|b| b.step),
    })
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}
