//! CSV and image exports for metrics.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::CalibrationTable;
use crate::error::{Error, Result};
use crate::noise::{save_image, BitDepth, Image};

/// Formats a metric for CSV output; infinities become `inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        v.to_string()
    }
}

/// Writes `bin_lower,bin_upper,mean_uncertainty,mean_mse,count` rows
/// followed by a `# UCE=<value>` line.
pub fn write_calibration_csv(table: &CalibrationTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    w.write_record(["bin_lower", "bin_upper", "mean_uncertainty", "mean_mse", "count"])?;
    for r in &table.rows {
        w.write_record([
            format_value(r.bin_lower),
            format_value(r.bin_upper),
            format_value(r.mean_uncertainty),
            format_value(r.mean_mse),
            r.count.to_string(),
        ])?;
    }
    let mut file = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    writeln!(file, "# UCE={}", format_value(table.uce)).map_err(|e| Error::io(path, e))
}

/// Path of the text file holding the normalisation factor of an exported
/// uncertainty map.
pub fn scale_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("scale.txt")
}

/// Saves a non-negative map as a PNG normalised by its maximum and writes
/// that maximum to the sidecar next to it. Returns the maximum.
pub fn save_uncertainty_map(map: &Image, path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    let normalised = if max > 0.0 {
        map.map(|v| v / max)
    } else {
        map.map(|_| 0.0)
    };
    save_image(&normalised, path, BitDepth::Eight)?;
    let side = scale_sidecar_path(path);
    std::fs::write(&side, format!("{}\n", format_value(max))).map_err(|e| Error::io(&side, e))?;
    Ok(max)
}
