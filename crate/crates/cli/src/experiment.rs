//! Turning a run configuration and a dataset into training data, validation
//! prompts, and a persisted training run.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ttm_core::conditioning::{Condition, EmbeddingProvider};
use ttm_core::evaluation::{LinearProbe, ToyFeatureExtractor};
use ttm_core::pipeline::{PromptSet, SampleValidator};
use ttm_core::sampling::SamplerConfig;
use ttm_core::schedule::NoiseSchedule;
use ttm_core::synthdata::{Dataset, Split, SynthExample};
use ttm_core::training::{select_best, train, MetricRecord, OptimizerState, TrainExample, TrainOutcome};
use ttm_core::unet::{condition_for, Checkpoint, UNet, UNetConfig};
use ttm_core::{Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_POINTER: &str = "best_checkpoint.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Seeds for evaluation prompts start here so they never coincide with training seeds.
pub const PROMPT_SEED_BASE: u64 = 1 << 40;

pub fn checkpoint_name(step: u64) -> String {
    format!("{CHECKPOINT_DIR}/step-{step:07}.ttmc")
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join(ttm_core::synthdata::MANIFEST_FILE).is_file() {
        return Err(CliError::Runtime(format!(
            "no dataset at {} (run `ttm gen-data` first)",
            dir.display()
        )));
    }
    let ds = Dataset::load(&dir)?;
    check_shapes(&cfg.model, &ds)?;
    Ok(ds)
}

pub fn check_shapes(model: &UNetConfig, ds: &Dataset) -> CliResult<()> {
    let [c, h, w] = ds.spec.latent_shape;
    if [model.in_channels, model.latent_height, model.latent_width] != [c, h, w] || model.out_channels != c {
        return Err(CliError::Usage(format!(
            "model expects {}x{}x{} latents, dataset has {c}x{h}x{w}",
            model.in_channels, model.latent_height, model.latent_width
        )));
    }
    Ok(())
}

pub fn conditions<T: Scalar>(
    model: &UNetConfig,
    provider: &dyn EmbeddingProvider<T>,
    prompts: &[&str],
) -> CliResult<Vec<Condition<T>>> {
    Ok(prompts
        .iter()
        .map(|p| condition_for(model, provider, p))
        .collect::<ttm_core::Result<_>>()?)
}

fn latent<T: Scalar>(e: &SynthExample) -> Tensor<T> {
    e.latent.cast()
}

pub fn train_examples<T: Scalar>(cfg: &RunConfig, ds: &Dataset) -> CliResult<Vec<TrainExample<T>>> {
    let provider = cfg.provider.build::<T>(&cfg.model);
    let examples: Vec<&SynthExample> = ds.split(Split::Train).collect();
    let prompts: Vec<&str> = examples.iter().map(|e| e.caption.as_str()).collect();
    let conds = conditions(&cfg.model, provider.as_ref(), &prompts)?;
    Ok(examples
        .iter()
        .zip(conds)
        .map(|(e, condition)| TrainExample {
            latent: latent(e),
            condition,
        })
        .collect())
}

/// The first `n` examples of `split` as prompts paired with their latents.
/// With `unconditional`, every prompt is replaced by the null condition.
pub fn prompt_set<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    split: Split,
    n: usize,
    unconditional: bool,
) -> CliResult<PromptSet<T>> {
    let examples: Vec<&SynthExample> = ds.split(split).take(n).collect();
    if examples.len() < 2 {
        return Err(CliError::Runtime(format!("{split:?} split has fewer than 2 examples")));
    }
    let conditions = if unconditional {
        vec![Condition::null(); examples.len()]
    } else {
        let provider = cfg.provider.build::<T>(&cfg.model);
        let prompts: Vec<&str> = examples.iter().map(|e| e.caption.as_str()).collect();
        conditions(&cfg.model, provider.as_ref(), &prompts)?
    };
    Ok(PromptSet {
        conditions,
        references: examples.iter().map(|e| latent(e)).collect(),
        seeds: (0..examples.len() as u64).map(|i| PROMPT_SEED_BASE + i).collect(),
    })
}

/// The committed label probe, when it applies to latents of this shape.
pub fn probe_for(shape: [usize; 3]) -> CliResult<Option<LinearProbe>> {
    let probe = LinearProbe::standard()?;
    Ok((probe.extractor_version == ToyFeatureExtractor::new(shape).version()).then_some(probe))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    ttm_core::formats::write_atomic(path, bytes).map_err(CliError::from)
}

/// Trains a run described by `cfg` into `dir`, writing the persisted
/// configuration, one checkpoint per validation point, the metric log, and
/// a pointer to the best checkpoint.
pub fn train_run<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    dir: &Path,
    resume: Option<Checkpoint<T>>,
    progress: &mut dyn FnMut(&MetricRecord),
) -> CliResult<TrainOutcome<T>> {
    cfg.validate()?;
    check_shapes(&cfg.model, ds)?;
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| CliError::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;

    let schedule = NoiseSchedule::<T>::from_spec(cfg.schedule)?;
    let (model, opt, mut log) = match resume {
        Some(ck) => {
            if ck.config != cfg.model || ck.schedule != cfg.schedule {
                return Err(CliError::Usage("checkpoint model or schedule differs from the run config".into()));
            }
            let opt = ck.optimizer.clone().map(OptimizerState::from_snapshot).unwrap_or_else(|| OptimizerState {
                step: ck.step,
                ..Default::default()
            });
            let log = read_metrics(&dir.join(METRICS_FILE))?
                .into_iter()
                .filter(|r| r.step <= ck.step)
                .collect();
            (UNet::new(ck.config, ck.weights)?, Some(opt), log)
        }
        None => (UNet::init(cfg.model.clone(), cfg.train.seed)?, None, Vec::new()),
    };
    let mut metrics = String::new();
    for r in &log {
        metrics.push_str(&serde_json::to_string(r).expect("record serializes"));
        metrics.push('\n');
    }
    write_file(&dir.join(METRICS_FILE), metrics.as_bytes())?;

    let data = train_examples::<T>(cfg, ds)?;
    let shape = ds.spec.latent_shape;
    let mut validator = SampleValidator {
        prompts: prompt_set(cfg, ds, Split::Val, cfg.validation.num_prompts, false)?,
        schedule: schedule.clone(),
        sampler: SamplerConfig {
            num_sampling_steps: cfg.validation.sampling_steps,
            ..cfg.sampler.clone()
        },
        extractor: ToyFeatureExtractor::new(shape),
        probe: probe_for(shape)?,
        chunk: cfg.validation.batch,
    };
    let metrics_path = dir.join(METRICS_FILE);
    let mut sink = |record: &MetricRecord, ck: &Checkpoint<T>| -> ttm_core::Result<()> {
        let name = checkpoint_name(record.step);
        ck.save(&dir.join(&name))?;
        let mut f = OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
        log.push(record.clone());
        if select_best(&log) == Some(log.len() - 1) {
            ttm_core::formats::write_atomic(&dir.join(BEST_POINTER), format!("{name}\n").as_bytes())?;
        }
        progress(record);
        Ok(())
    };
    Ok(train(&cfg.train, &data, model, &schedule, opt, Some(&mut validator), &mut sink)?)
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))))
        .collect()
}

/// The checkpoint named by a run's best-checkpoint pointer.
pub fn best_checkpoint(run_dir: &Path) -> CliResult<PathBuf> {
    let p = run_dir.join(BEST_POINTER);
    let name = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    Ok(run_dir.join(name.trim()))
}
