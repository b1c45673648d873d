//! `illusion export`: print sheets from a finished run directory.

use std::path::{Path, PathBuf};

use illusion_core::arrangements::IllusionSpec;
use illusion_core::fabrication::{export_print_sheets, PrintLayout, PrintSheet};
use illusion_core::optimizer::resume;

use crate::error::CliError;
use crate::run::{CHECKPOINT_FILE, SPEC_FILE};

pub fn export(run_dir: &Path, layout: &PrintLayout, out_dir: Option<&Path>) -> Result<PrintSheet, CliError> {
    let spec_path = run_dir.join(SPEC_FILE);
    let text =
        std::fs::read_to_string(&spec_path).map_err(|e| CliError::Read(spec_path.clone(), e))?;
    let spec: IllusionSpec = serde_json::from_str(&text).map_err(illusion_core::Error::from)?;
    let state = resume(run_dir.join(CHECKPOINT_FILE))?;
    let primes = state.render_primes();
    let out: PathBuf = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("print"));
    Ok(export_print_sheets(&spec, &primes, layout, out)?)
}
