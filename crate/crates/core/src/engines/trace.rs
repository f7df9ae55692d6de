use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::format_value;

pub const TRACE_HEADER: [&str; 8] = [
    "iter",
    "loss",
    "mse_noisy",
    "psnr_noisy",
    "psnr_gt",
    "ssim_gt",
    "U",
    "wall_ms",
];

/// Metrics recorded at one iteration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub mse_noisy: f64,
    pub psnr_noisy: f64,
    pub psnr_gt: Option<f64>,
    pub ssim_gt: Option<f64>,
    pub u: Option<f64>,
    pub wall_ms: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

/// Writes `rows` as CSV. Wall-clock times are left empty unless
/// `with_wall_time` is set, so repeated runs produce identical files.
pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>, with_wall_time: bool) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format_value(r.loss),
            format_value(r.mse_noisy),
            format_value(r.psnr_noisy),
            opt(r.psnr_gt),
            opt(r.ssim_gt),
            opt(r.u),
            if with_wall_time { opt(r.wall_ms) } else { String::new() },
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse(path: &Path, field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: format!("not a number: {field:?}"),
        })
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unexpected header {header:?}"),
        });
    }
    let missing = || Error::Format {
        path: path.to_path_buf(),
        reason: "missing required field".into(),
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| parse(path, rec.get(i).unwrap_or(""));
        rows.push(TraceRow {
            iteration: rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(missing)?,
            loss: f(1)?.ok_or_else(missing)?,
            mse_noisy: f(2)?.ok_or_else(missing)?,
            psnr_noisy: f(3)?.ok_or_else(missing)?,
            psnr_gt: f(4)?,
            ssim_gt: f(5)?,
            u: f(6)?,
            wall_ms: f(7)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_blank_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![TraceRow {
            iteration: 3,
            loss: 0.5,
            mse_noisy: 0.01,
            psnr_noisy: f64::INFINITY,
            psnr_gt: None,
            ssim_gt: Some(0.9),
            u: None,
            wall_ms: Some(12.5),
        }];
        write_trace_csv(&rows, &path, false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "iter,loss,mse_noisy,psnr_noisy,psnr_gt,ssim_gt,U,wall_ms\n3,0.5,0.01,inf,,0.9,,\n"
        );
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back[0].psnr_noisy, f64::INFINITY);
        assert_eq!(back[0].wall_ms, None);
    }
}
