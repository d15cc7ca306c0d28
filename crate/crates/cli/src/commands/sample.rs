use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ttm_core::conditioning::Condition;
use ttm_core::formats::{write_atomic, write_latent};
use ttm_core::pipeline::generate;
use ttm_core::sampling::{CfgFormula, SampleManifest, SamplerConfig};
use ttm_core::schedule::NoiseSchedule;
use ttm_core::training::Precision;
use ttm_core::unet::{condition_for, Checkpoint, UNet};
use ttm_core::Scalar;

use crate::config::{output_root, ProviderConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::CONFIG_FILE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormulaArg {
    Standard,
    PaperLiteral,
}

impl From<FormulaArg> for CfgFormula {
    fn from(f: FormulaArg) -> Self {
        match f {
            FormulaArg::Standard => CfgFormula::Standard,
            FormulaArg::PaperLiteral => CfgFormula::PaperLiteral,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text prompt; required unless --unconditional
    #[arg(long, required_unless_present = "unconditional")]
    pub prompt: Option<String>,
    /// Sample with the null condition only
    #[arg(long)]
    pub unconditional: bool,
    /// Run configuration naming the embedding provider [default: the
    /// checkpoint's run directory config, else the hash provider]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $TTM_OUTPUT_ROOT/samples]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the first sample; sample i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub num: usize,
    /// DDIM steps
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Guidance scale
    #[arg(long, default_value_t = 9.0)]
    pub omega: f64,
    #[arg(long, value_enum, default_value_t = FormulaArg::Standard)]
    pub cfg_formula: FormulaArg,
    /// Largest sampling batch
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

fn run_config_for(args: &SampleArgs) -> CliResult<Option<RunConfig>> {
    if let Some(p) = &args.config {
        return RunConfig::load(p).map(Some);
    }
    let guess = args
        .checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file());
    guess.map(|p| RunConfig::load(&p)).transpose()
}

/// Writes `sample-<seed>.lat` and its `.json` manifest per sample; returns the latent paths.
pub fn run(args: &SampleArgs) -> CliResult<Vec<PathBuf>> {
    if args.num == 0 {
        return Err(CliError::Usage("--num must be positive".into()));
    }
    let run_cfg = run_config_for(args)?;
    match run_cfg.as_ref().map_or(Precision::F32, |c| c.train.precision) {
        Precision::F32 => run_typed::<f32>(args, run_cfg),
        Precision::F64 => run_typed::<f64>(args, run_cfg),
    }
}

fn run_typed<T: Scalar>(args: &SampleArgs, run_cfg: Option<RunConfig>) -> CliResult<Vec<PathBuf>> {
    let ck = Checkpoint::<T>::load(&args.checkpoint)?;
    let checkpoint_id = ck.id();
    let sampler = SamplerConfig {
        num_sampling_steps: args.steps,
        guidance_scale: args.omega,
        cfg_formula: args.cfg_formula.into(),
        seed: args.seed,
    };
    sampler.validate()?;
    let schedule = NoiseSchedule::<T>::from_spec(ck.schedule)?;
    if args.steps > schedule.num_steps() {
        return Err(CliError::Usage(format!(
            "--steps {} exceeds the schedule's {} steps",
            args.steps,
            schedule.num_steps()
        )));
    }
    let model = UNet::new(ck.config, ck.weights)?;
    let cfg = model.config();
    let cond = if args.unconditional {
        Condition::null()
    } else {
        let provider = run_cfg.map_or_else(ProviderConfig::default, |c| c.provider).build::<T>(cfg);
        let prompt = args.prompt.as_deref().unwrap_or_default();
        condition_for(cfg, provider.as_ref(), prompt)
            .map_err(|e| CliError::Runtime(format!("prompt {prompt:?} with provider {:?}: {e}", provider.name())))?
    };
    let seeds: Vec<u64> = (0..args.num as u64).map(|i| args.seed + i).collect();
    let conds = vec![cond; args.num];
    let shape = [cfg.in_channels, cfg.latent_height, cfg.latent_width];
    let latents = generate(&model, &schedule, &sampler, &conds, &seeds, &shape, args.batch)?;

    let out = args.out.clone().unwrap_or_else(|| output_root().join("samples"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut paths = Vec::with_capacity(latents.len());
    for (z, &seed) in latents.iter().zip(&seeds) {
        let stem = format!("sample-{seed:06}");
        let lat = out.join(format!("{stem}.lat"));
        write_latent(&lat, z)?;
        let manifest = SampleManifest {
            prompt: if args.unconditional {
                String::new()
            } else {
                args.prompt.clone().unwrap_or_default()
            },
            seed,
            num_sampling_steps: sampler.num_sampling_steps,
            guidance_scale: sampler.guidance_scale,
            cfg_formula: sampler.cfg_formula,
            checkpoint_id: checkpoint_id.clone(),
            latent_file: format!("{stem}.lat"),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&out.join(format!("{stem}.json")), json.as_bytes())?;
        paths.push(lat);
    }
    Ok(paths)
}
