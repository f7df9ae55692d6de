//! Image quality and uncertainty calibration metrics.

mod report;

use serde::{Deserialize, Serialize};

use crate::engines::PredictiveResult;
use crate::error::{Error, Result};
use crate::noise::Image;

pub use report::{format_value, save_uncertainty_map, scale_sidecar_path, write_calibration_csv};

/// Default number of calibration bins.
pub const DEFAULT_BINS: usize = 10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        ))
    }
}

/// Mean squared difference.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "PSNR peak value must be positive, got {max_val}"
        )));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &data[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let products = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (da, db) = (a.data(), b.data());
    let mu_a = filter_valid(da, w, h, &taps);
    let mu_b = filter_valid(db, w, h, &taps);
    let e_aa = filter_valid(&products(da, da), w, h, &taps);
    let e_bb = filter_valid(&products(db, db), w, h, &taps);
    let e_ab = filter_valid(&products(da, db), w, h, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// One bin of a calibration diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub mean_uncertainty: f64,
    pub mean_mse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub rows: Vec<CalibrationRow>,
    pub uce: f64,
    pub n_bins: usize,
}

impl CalibrationTable {
    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Count-weighted mean absolute gap between per-bin error and
    /// uncertainty, recomputed from the rows.
    pub fn uce_from_rows(&self) -> f64 {
        let n = self.total_count() as f64;
        self.rows
            .iter()
            .map(|r| r.count as f64 / n * (r.mean_mse - r.mean_uncertainty).abs())
            .sum()
    }
}

/// Bins pixels by uncertainty into `n_bins` equal-width bins over
/// `[0, max uncertainty]` and compares per-bin mean uncertainty with the
/// per-bin mean squared error.
pub fn calibration(uncertainty: &[f64], sq_error: &[f64], n_bins: usize) -> Result<CalibrationTable> {
    if uncertainty.len() != sq_error.len() {
        return Err(Error::shape(
            "calibration",
            format!(
                "{} uncertainty values vs {} errors",
                uncertainty.len(),
                sq_error.len()
            ),
        ));
    }
    if uncertainty.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one pixel".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one bin".into()));
    }
    if let Some(u) = uncertainty.iter().find(|u| !(**u >= 0.0 && u.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "uncertainties must be finite and non-negative, found {u}"
        )));
    }
    if sq_error.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("calibration error map".into()));
    }
    let max = uncertainty.iter().cloned().fold(0.0, f64::max);
    let width = max / n_bins as f64;
    let mut sum_u = vec![0.0; n_bins];
    let mut sum_e = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&u, &e) in uncertainty.iter().zip(sq_error) {
        let b = if max > 0.0 {
            ((u / max * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            0
        };
        sum_u[b] += u;
        sum_e[b] += e;
        count[b] += 1;
    }
    let rows: Vec<CalibrationRow> = (0..n_bins)
        .map(|b| {
            let (mu, me) = if count[b] > 0 {
                let n = count[b] as f64;
                (sum_u[b] / n, sum_e[b] / n)
            } else {
                (0.0, 0.0)
            };
            CalibrationRow {
                bin_lower: b as f64 * width,
                bin_upper: if b + 1 == n_bins { max } else { (b + 1) as f64 * width },
                mean_uncertainty: mu,
                mean_mse: me,
                count: count[b],
            }
        })
        .collect();
    let mut table = CalibrationTable {
        rows,
        uce: 0.0,
        n_bins,
    };
    table.uce = table.uce_from_rows();
    Ok(table)
}

/// Per-pixel squared error between two images.
pub fn squared_error_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_pair("squared_error_map", a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .collect())
}

/// Mean of the total predictive variance map.
pub fn scalar_uncertainty(result: &PredictiveResult) -> f64 {
    result.total.mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: Vec<f64>) -> Image {
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn psnr_formula() {
        let a = Image::filled(4, 4, 0.5).unwrap();
        let b = Image::filled(4, 4, 0.6).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0.0).is_err());
        assert!(psnr(&a, &Image::filled(4, 5, 0.5).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_is_exact() {
        let data: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let a = img(20, 20, data);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&Image::filled(10, 10, 0.1).unwrap(), &Image::filled(10, 10, 0.1).unwrap()).is_err());
    }

    #[test]
    fn calibration_double_error_single_bin() {
        let err = vec![0.01, 0.02, 0.03, 0.04];
        let unc: Vec<f64> = err.iter().map(|e| 2.0 * e).collect();
        let t = calibration(&unc, &err, 1).unwrap();
        assert!((t.uce - 0.025).abs() < 1e-15);
        assert_eq!(t.total_count(), 4);
    }

    #[test]
    fn calibration_rejects_negative() {
        assert!(calibration(&[0.1, -0.1], &[0.0, 0.0], 2).is_err());
        assert!(calibration(&[0.1], &[0.0, 0.0], 2).is_err());
        assert!(calibration(&[0.1], &[0.0], 0).is_err());
    }

    #[test]
    fn calibration_empty_bins_emitted() {
        let t = calibration(&[0.0, 1.0], &[0.0, 1.0], 4).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[1].count, 0);
        assert_eq!(t.rows[3].count, 1);
        assert_eq!(t.uce, 0.0);
        let zero = calibration(&[0.0, 0.0], &[0.1, 0.3], 3).unwrap();
        assert_eq!(zero.rows[0].count, 2);
        assert!((zero.uce - 0.2).abs() < 1e-15);
    }
}
