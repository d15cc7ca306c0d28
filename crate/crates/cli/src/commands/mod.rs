pub mod ablate;
pub mod eval;
pub mod gen_data;
pub mod sample;
pub mod train;

use std::path::Path;

use crate::error::{CliError, CliResult};

/// Refuses to write into an existing non-empty directory unless forced.
pub(crate) fn ensure_writable_dir(dir: &Path, force: bool) -> CliResult<()> {
    if !force {
        if let Ok(mut entries) = std::fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(CliError::Runtime(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
