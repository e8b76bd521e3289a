//! Output files: directories, JSON, CSV and residual dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use horse_core::edit_math::ResidualStack;
use horse_core::{EditError, Result};
use nalgebra::DMatrix;
use serde::Serialize;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| EditError::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Writes `contents`, creating the parent directory first.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(path, contents)
        .map_err(|e| EditError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// Fails with an input error when `path` does not exist.
pub fn require(path: &Path, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(EditError::Input(format!("{what} not found: {}", path.display())))
    }
}

/// `# layer=<l> rows=<r> cols=<c>` followed by one CSV line per row.
pub fn matrix_csv(layer: usize, m: &DMatrix<f64>) -> String {
    let mut s = format!("# layer={layer} rows={} cols={}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

/// One file per layer and stage: `batch<k>_layer<l>_<stage>.csv`.
pub fn dump_residuals(dir: &Path, batch: usize, raw: &ResidualStack, spread: &ResidualStack) -> Result<()> {
    ensure_dir(dir)?;
    for (stage, stack) in [("raw", raw), ("spread", spread)] {
        for (&layer, r) in stack.layers.iter().zip(&stack.residuals) {
            let name = format!("batch{batch:03}_layer{layer}_{stage}.csv");
            write_file(&dir.join(name), matrix_csv(layer, r))?;
        }
    }
    Ok(())
}

/// Formats an optional percentage for CSV.
pub fn csv_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "skipped".to_string(), |x| format!("{x:.4}"))
}
