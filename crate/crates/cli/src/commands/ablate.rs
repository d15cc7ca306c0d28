use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use ttm_core::evaluation::ToyFeatureExtractor;
use ttm_core::schedule::NoiseSchedule;
use ttm_core::synthdata::{Dataset, Split};
use ttm_core::training::{smoothed_endpoints, Precision, TrainStatus};
use ttm_core::unet::{GlobalMode, UNet};
use ttm_core::Scalar;

use crate::config::{output_root, RunConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{load_dataset, probe_for, prompt_set, train_run};

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// Base run configuration shared by every variant
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory [default: $TTM_OUTPUT_ROOT/ablation]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seeds; each variant is trained once per seed
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Override `train.total_steps`
    #[arg(long)]
    pub steps: Option<u64>,
    /// Suppress per-validation progress lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    LocalOnly,
    ProviderGlobal,
    MeanPool,
    Sap,
    /// Trained with every condition dropped and sampled with the null condition.
    Unconditional,
}

impl Variant {
    pub const CONDITIONED: [Variant; 4] = [Variant::LocalOnly, Variant::ProviderGlobal, Variant::MeanPool, Variant::Sap];

    pub fn label(self) -> &'static str {
        match self {
            Variant::LocalOnly => "local-only",
            Variant::ProviderGlobal => "provider-global + local",
            Variant::MeanPool => "mean-pool + local",
            Variant::Sap => "SAP + local",
            Variant::Unconditional => "unconditional",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Variant::LocalOnly => "local-only",
            Variant::ProviderGlobal => "provider-global",
            Variant::MeanPool => "mean-pool",
            Variant::Sap => "sap",
            Variant::Unconditional => "unconditional",
        }
    }

    /// The base configuration specialized to this variant and seed.
    pub fn configure(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.name = format!("{}-seed{seed}", self.slug());
        cfg.train.seed = seed;
        cfg.model.global_mode = match self {
            Variant::LocalOnly | Variant::Unconditional => GlobalMode::None,
            Variant::ProviderGlobal => GlobalMode::Provider,
            Variant::MeanPool => GlobalMode::Mean,
            Variant::Sap => GlobalMode::Sap,
        };
        if self == Variant::ProviderGlobal && cfg.model.provider_global_dim == 0 {
            cfg.model.provider_global_dim = cfg.model.local_dim;
        }
        if self == Variant::Unconditional {
            cfg.train.cfg_dropout.p = 1.0;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub fad: f64,
    pub kl: Option<f64>,
    pub best_step: u64,
    /// Mean training loss over the first and last 100 steps.
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub parameter_count: usize,
    pub fad: f64,
    pub kl: Option<f64>,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub rows: Vec<VariantResult>,
    pub baseline: VariantResult,
}

pub const TABLE_NOTE: &str = "Global/local text embeddings come from deterministic hash providers standing in for \
pretrained text encoders (CLAP, T5); scores are toy FAD/KL over synthetic latents and are not comparable to \
published values.";

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Conditioning ablation");
        let _ = writeln!(s, "# {TABLE_NOTE}");
        let seeds: Vec<String> = self.seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            s,
            "# {} training steps per run; FAD and KL are means over seeds {}.",
            self.total_steps,
            seeds.join(", ")
        );
        let _ = writeln!(s, "| variant | parameters | FAD | KL |");
        let _ = writeln!(s, "|---|---:|---:|---:|");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {:.4} | {} |", r.variant.label(), r.parameter_count, r.fad, fmt_kl(r.kl));
        }
        let b = &self.baseline;
        let _ = writeln!(
            s,
            "\nReference: unconditional baseline, {} parameters, FAD {:.4}, KL {}.",
            b.parameter_count,
            b.fad,
            fmt_kl(b.kl)
        );
        s
    }
}

fn fmt_kl(kl: Option<f64>) -> String {
    kl.map_or_else(|| "n/a".into(), |v| format!("{v:.5}"))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Trains one variant for one seed and scores its best checkpoint on the test prompts.
pub fn run_variant(base: &RunConfig, ds: &Dataset, variant: Variant, seed: u64, dir: &Path, quiet: bool) -> CliResult<RunResult> {
    let cfg = variant.configure(base, seed);
    match cfg.train.precision {
        Precision::F32 => run_variant_typed::<f32>(&cfg, ds, variant, seed, dir, quiet),
        Precision::F64 => run_variant_typed::<f64>(&cfg, ds, variant, seed, dir, quiet),
    }
}

fn run_variant_typed<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    variant: Variant,
    seed: u64,
    dir: &Path,
    quiet: bool,
) -> CliResult<RunResult> {
    let label = variant.label();
    let mut progress = |r: &ttm_core::training::MetricRecord| {
        if !quiet {
            eprintln!(
                "[{label} seed {seed}] step {:>6} loss {:.5} fad {} kl {}",
                r.step,
                r.loss,
                super::train::fmt_opt(r.fad),
                super::train::fmt_opt(r.kl)
            );
        }
    };
    let outcome = train_run::<T>(cfg, ds, dir, None, &mut progress)?;
    if let TrainStatus::Diverged { step } = outcome.status {
        return Err(CliError::Runtime(format!("{label} (seed {seed}) diverged at step {step}")));
    }
    let best = outcome.best.unwrap_or(outcome.last);
    let model = UNet::new(best.config, best.weights)?;
    let schedule = NoiseSchedule::<T>::from_spec(cfg.schedule)?;
    let prompts = prompt_set::<T>(
        cfg,
        ds,
        Split::Test,
        cfg.evaluation.num_prompts,
        variant == Variant::Unconditional,
    )?;
    let shape = ds.spec.latent_shape;
    let probe = probe_for(shape)?;
    let (_, report) = prompts.evaluate_model(
        &model,
        &schedule,
        &cfg.sampler,
        &ToyFeatureExtractor::new(shape),
        probe.as_ref(),
        cfg.evaluation.batch,
    )?;
    let (initial_loss, final_loss) = smoothed_endpoints(&outcome.loss_history, 100).unwrap_or((f64::NAN, f64::NAN));
    if !quiet {
        eprintln!(
            "[{label} seed {seed}] test fad {:.4} kl {} (best step {}, loss {initial_loss:.4} -> {final_loss:.4})",
            report.fad,
            fmt_kl(report.kl),
            best.step
        );
    }
    Ok(RunResult {
        seed,
        fad: report.fad,
        kl: report.kl,
        best_step: best.step,
        initial_loss,
        final_loss,
    })
}

fn summarize(base: &RunConfig, variant: Variant, runs: Vec<RunResult>) -> VariantResult {
    let kl = runs.iter().map(|r| r.kl).collect::<Option<Vec<f64>>>().map(|v| mean(v.into_iter()));
    VariantResult {
        variant,
        parameter_count: variant.configure(base, 0).model.parameter_count(),
        fad: mean(runs.iter().map(|r| r.fad)),
        kl,
        runs,
    }
}

pub fn run(args: &AblateArgs) -> CliResult<AblationReport> {
    let mut base = RunConfig::load(&args.config)?;
    if let Some(steps) = args.steps {
        base.train.total_steps = steps;
    }
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must name at least one seed".into()));
    }
    for v in Variant::CONDITIONED.iter().chain([&Variant::Unconditional]) {
        v.configure(&base, 0).validate()?;
    }
    let ds = load_dataset(&base)?;
    let out = args.out.clone().unwrap_or_else(|| output_root().join("ablation"));
    let mut results = Vec::new();
    for v in Variant::CONDITIONED.into_iter().chain([Variant::Unconditional]) {
        let mut runs = Vec::new();
        for &seed in &args.seeds {
            let dir = out.join(v.slug()).join(format!("seed-{seed}"));
            runs.push(run_variant(&base, &ds, v, seed, &dir, args.quiet)?);
        }
        results.push(summarize(&base, v, runs));
    }
    let baseline = results.pop().expect("baseline result");
    let report = AblationReport {
        seeds: args.seeds.clone(),
        total_steps: base.train.total_steps,
        rows: results,
        baseline,
    };
    let table = report.table();
    ttm_core::formats::write_atomic(&out.join("ablation.md"), table.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    ttm_core::formats::write_atomic(&out.join("ablation.json"), json.as_bytes())?;
    print!("{table}");
    Ok(report)
}
