//! PSNR, SSIM and NRMSE, and per-dataset evaluation reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kspace::{undersample, zero_fill, ComplexImage, KSpaceMeasurement};
use crate::masks::{generate_mask, MaskSpec};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(reference: &[f64], test: &[f64]) -> Result<()> {
    if reference.len() != test.len() {
        return Err(Error::shape(reference.len(), test.len()));
    }
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

fn range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// `20 log10(peak / rmse)` with `peak = max(ref) − min(ref)`; `+inf` for identical images.
pub fn psnr(reference: &[f64], test: &[f64]) -> Result<f64> {
    check_pair(reference, test)?;
    let peak = range(reference);
    if !(peak > 0.0) {
        return Err(Error::UndefinedMetric("PSNR of a constant reference".into()));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// `‖test − ref‖₂ / ‖ref‖₂`.
pub fn nrmse(reference: &[f64], test: &[f64]) -> Result<f64> {
    check_pair(reference, test)?;
    let den = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("NRMSE against a zero reference".into()));
    }
    let num = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over every fully contained window.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over 11×11 Gaussian windows (σ = 1.5), dynamic range from `reference`.
pub fn ssim(reference: &[f64], test: &[f64], height: usize, width: usize) -> Result<f64> {
    check_pair(reference, test)?;
    if reference.len() != height * width {
        return Err(Error::shape(height * width, reference.len()));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let l = range(reference);
    if !(l > 0.0) {
        return Err(Error::UndefinedMetric("SSIM of a constant reference".into()));
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let taps = gaussian_taps();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { reference.iter().zip(test).map(|(&a, &b)| f(a, b)).collect() };
    let mx = filter_valid(reference, height, width, &taps);
    let my = filter_valid(test, height, width, &taps);
    let mxx = filter_valid(&prod(&|a, _| a * a), height, width, &taps);
    let myy = filter_valid(&prod(&|_, b| b * b), height, width, &taps);
    let mxy = filter_valid(&prod(&|a, b| a * b), height, width, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// All three metrics for one image pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

impl Triple {
    pub fn compute(reference: &[f64], test: &[f64], height: usize, width: usize) -> Result<Self> {
        Ok(Triple {
            psnr: psnr(reference, test)?,
            ssim: ssim(reference, test, height, width)?,
            nrmse: nrmse(reference, test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub phase_psnr: Option<f64>,
    pub phase_ssim: Option<f64>,
    pub phase_nrmse: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Aggregate { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.iter().all(|&v| v == values[0]) {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        };
        Aggregate { mean, std }
    }
}

/// Structured-text summary of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub checkpoint: String,
    pub mask: MaskSpec,
    pub achieved_rate: f64,
    pub count: usize,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub nrmse: Aggregate,
    pub phase_psnr: Option<Aggregate>,
    pub phase_ssim: Option<Aggregate>,
    pub phase_nrmse: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub checkpoint: String,
    pub mask: MaskSpec,
    pub achieved_rate: f64,
    pub rows: Vec<MetricRow>,
}

impl EvaluationReport {
    pub fn column(&self, f: impl Fn(&MetricRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    fn phase_column(&self, f: impl Fn(&MetricRow) -> Option<f64>) -> Option<Aggregate> {
        let vals: Option<Vec<f64>> = self.rows.iter().map(f).collect();
        vals.filter(|v| !v.is_empty()).map(|v| Aggregate::of(&v))
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            checkpoint: self.checkpoint.clone(),
            mask: self.mask,
            achieved_rate: self.achieved_rate,
            count: self.rows.len(),
            psnr: Aggregate::of(&self.column(|r| r.psnr)),
            ssim: Aggregate::of(&self.column(|r| r.ssim)),
            nrmse: Aggregate::of(&self.column(|r| r.nrmse)),
            phase_psnr: self.phase_column(|r| r.phase_psnr),
            phase_ssim: self.phase_column(|r| r.phase_ssim),
            phase_nrmse: self.phase_column(|r| r.phase_nrmse),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::InvalidInput(format!("report row: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("report: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Vec<MetricRow>> {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| Error::malformed("evaluation report", e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.toml` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let toml_path = dir.join(format!("{stem}.toml"));
        let text = toml::to_string(&self.summary()).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))
    }
}

/// Undersamples every test image in its original units with the mask from
/// `mask_spec`, reconstructs it with `reconstruct`, and scores magnitudes
/// (plus phases for complex datasets).
pub fn evaluate_with(
    test_set: &Dataset,
    mask_spec: &MaskSpec,
    checkpoint: &str,
    mut reconstruct: impl FnMut(&KSpaceMeasurement) -> Result<ComplexImage>,
) -> Result<EvaluationReport> {
    let mask = generate_mask(mask_spec)?;
    let mut rows = Vec::with_capacity(test_set.len());
    for i in 0..test_set.len() {
        let truth = test_set.raw_item(i);
        let (h, w) = truth.shape();
        let m = undersample(&truth, &mask)?;
        let recon = reconstruct(&m)?;
        if recon.shape() != truth.shape() {
            return Err(Error::shape(truth.shape(), recon.shape()));
        }
        let mag = Triple::compute(&truth.magnitude(), &recon.magnitude(), h, w)?;
        let phase = if test_set.is_complex() {
            Some(Triple::compute(&truth.phase(), &recon.phase(), h, w)?)
        } else {
            None
        };
        rows.push(MetricRow {
            id: test_set.names()[i].clone(),
            psnr: mag.psnr,
            ssim: mag.ssim,
            nrmse: mag.nrmse,
            phase_psnr: phase.map(|p| p.psnr),
            phase_ssim: phase.map(|p| p.ssim),
            phase_nrmse: phase.map(|p| p.nrmse),
        });
    }
    Ok(EvaluationReport {
        checkpoint: checkpoint.to_string(),
        mask: *mask_spec,
        achieved_rate: mask.rate(),
        rows,
    })
}

/// Report for the zero-filling baseline.
pub fn zero_fill_baseline(test_set: &Dataset, mask_spec: &MaskSpec) -> Result<EvaluationReport> {
    evaluate_with(test_set, mask_spec, "zero-fill", zero_fill)
}
