use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ttm_core::evaluation::{evaluate, EvalReport, KlDirection, KlRequest, ToyFeatureExtractor};
use ttm_core::formats::{read_latent, write_atomic};
use ttm_core::sampling::SampleManifest;
use ttm_core::synthdata::{Dataset, Split, MANIFEST_FILE};
use ttm_core::Tensor;

use crate::error::{CliError, CliResult};
use crate::experiment::probe_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    RefGen,
    GenRef,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory of generated `.lat` files (with `.json` sample manifests) or a dataset
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference directory: a dataset or a directory of `.lat` files
    #[arg(long)]
    pub reference: PathBuf,
    /// Which split to use when a directory is a dataset
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also compute the KL score; every generated sample must pair with a reference by prompt
    #[arg(long)]
    pub kl: bool,
    #[arg(long, value_enum, default_value_t = DirectionArg::RefGen)]
    pub kl_direction: DirectionArg,
    /// Report path [default: <generated>/eval.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A latent with the prompt it was generated from (or captioned with), if known.
#[derive(Clone, Debug)]
pub struct Item {
    pub latent: Tensor<f64>,
    pub prompt: Option<String>,
}

pub fn load_items(dir: &Path, split: SplitArg) -> CliResult<Vec<Item>> {
    if dir.join(MANIFEST_FILE).is_file() {
        let ds = Dataset::load(dir)?;
        let keep = |s: Split| match split {
            SplitArg::All => true,
            SplitArg::Train => s == Split::Train,
            SplitArg::Val => s == Split::Val,
            SplitArg::Test => s == Split::Test,
        };
        return Ok(ds
            .examples
            .iter()
            .filter(|e| keep(e.split))
            .map(|e| Item {
                latent: e.latent.cast(),
                prompt: Some(e.caption.clone()),
            })
            .collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lat"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let sidecar = p.with_extension("json");
            let prompt = if sidecar.is_file() {
                let text = fs::read_to_string(&sidecar).map_err(|e| CliError::io(&sidecar, e))?;
                let m: SampleManifest = serde_json::from_str(&text)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", sidecar.display())))?;
                Some(m.prompt)
            } else {
                None
            };
            Ok(Item {
                latent: read_latent(&p)?,
                prompt,
            })
        })
        .collect()
}

/// Pairs each generated item with a reference of the same prompt. The k-th
/// generated sample of a prompt takes the k-th matching reference, cycling
/// when there are fewer references than samples.
pub fn pair_by_prompt(generated: &[Item], reference: &[Item]) -> CliResult<Vec<usize>> {
    let mut by_prompt: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, r) in reference.iter().enumerate() {
        if let Some(p) = r.prompt.as_deref() {
            by_prompt.entry(p).or_default().push(j);
        }
    }
    let mut used: HashMap<&str, usize> = HashMap::new();
    generated
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let prompt = g.prompt.as_deref().filter(|p| !p.is_empty()).ok_or_else(|| {
                CliError::Runtime(format!("generated sample {i} has no prompt to pair on"))
            })?;
            let refs = by_prompt
                .get(prompt)
                .ok_or_else(|| CliError::Runtime(format!("no reference sample for prompt {prompt:?}")))?;
            let k = used.entry(prompt).or_default();
            let j = refs[*k % refs.len()];
            *k += 1;
            Ok(j)
        })
        .collect()
}

pub fn run(args: &EvalArgs) -> CliResult<EvalReport> {
    let gen = load_items(&args.generated, args.split)?;
    let reference = load_items(&args.reference, args.split)?;
    for (name, set) in [("generated", &gen), ("reference", &reference)] {
        if set.len() < 2 {
            return Err(CliError::Runtime(format!("{name} set needs at least 2 latents, found {}", set.len())));
        }
    }
    let s = gen[0].latent.shape();
    let shape = [s[0], s[1], s[2]];
    let extractor = ToyFeatureExtractor::new(shape);
    let probe = if args.kl {
        Some(probe_for(shape)?.ok_or_else(|| {
            CliError::Runtime(format!("no label probe for {shape:?} latents; KL unavailable"))
        })?)
    } else {
        None
    };
    let pairs = if args.kl { pair_by_prompt(&gen, &reference)? } else { Vec::new() };
    let kl = probe.as_ref().map(|probe| KlRequest {
        probe,
        pairs: &pairs,
        direction: match args.kl_direction {
            DirectionArg::RefGen => KlDirection::RefGen,
            DirectionArg::GenRef => KlDirection::GenRef,
        },
    });
    let g: Vec<_> = gen.into_iter().map(|i| i.latent).collect();
    let r: Vec<_> = reference.into_iter().map(|i| i.latent).collect();
    let report = evaluate(&extractor, &g, &r, kl)?;
    let out = args.out.clone().unwrap_or_else(|| args.generated.join("eval.json"));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out, json.as_bytes())?;
    println!("{json}");
    Ok(report)
}
