use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use ttm_core::synthdata::{default_held_out, generate_dataset, Attributes, CaptionGrammar, DatasetSpec, Slot, MANIFEST_FILE};

use super::ensure_writable_dir;
use crate::config::default_dataset_dir;
use crate::error::{CliError, CliResult};

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Output directory [default: $TTM_OUTPUT_ROOT/data]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub n_train: usize,
    #[arg(long, default_value_t = 64)]
    pub n_val: usize,
    #[arg(long, default_value_t = 64)]
    pub n_test: usize,
    /// TOML grammar file with `template`, `[[slots]]` and optional `held_out`
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Overwrite an existing dataset directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarFile {
    template: String,
    slots: Vec<Slot>,
    held_out: Option<Vec<Attributes>>,
}

fn read_grammar(path: &Path) -> CliResult<(CaptionGrammar, Vec<Attributes>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--grammar {}: {e}", path.display())))?;
    let g: GrammarFile = toml::from_str(&text).map_err(|e| CliError::Usage(format!("--grammar {}: {e}", path.display())))?;
    let grammar = CaptionGrammar {
        slots: g.slots,
        template: g.template,
    };
    let held_out = match g.held_out {
        Some(h) => h,
        None if grammar == CaptionGrammar::default() => default_held_out(),
        None => Vec::new(),
    };
    Ok((grammar, held_out))
}

pub fn run(args: &GenDataArgs) -> CliResult<PathBuf> {
    let mut spec = DatasetSpec::new(args.seed, args.n_train, args.n_val, args.n_test);
    if let Some(path) = &args.grammar {
        (spec.grammar, spec.held_out) = read_grammar(path)?;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = args.out.clone().unwrap_or_else(default_dataset_dir);
    ensure_writable_dir(&out, args.force)?;
    if args.force {
        for stale in [out.join("latents"), out.join(MANIFEST_FILE)] {
            if stale.is_dir() {
                fs::remove_dir_all(&stale).map_err(|e| CliError::io(&stale, e))?;
            } else if stale.is_file() {
                fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
            }
        }
    }
    let ds = generate_dataset(&spec)?;
    ds.save(&out)?;
    Ok(out)
}
