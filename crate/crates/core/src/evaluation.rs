//! Threshold calibration, adaptive zero-shot thresholding, MAE/RMSE
//! reporting, density-binned error analysis and confidence-map export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::round6;
use crate::pipeline::{count_from_similarity, SimilarityMatrix, TokenGrid};

/// Default calibration grid: 0.05 to 0.95 in steps of 0.01.
pub fn default_grid() -> Vec<f64> {
    (5..=95).map(|i| i as f64 / 100.0).collect()
}

/// Calibrated thresholds: the base detection threshold and the zero-shot
/// tripling constant, both picked on the same holdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub sigma_thr: f64,
    pub tau: f64,
    /// Holdout MAE at the chosen base threshold.
    pub mae: f64,
    pub grid: Vec<f64>,
    pub seed: u64,
}

/// Effective threshold under the adaptive zero-shot rule: triple the base
/// threshold (clamped to 1) when the matrix maximum exceeds tau; identity
/// outside zero-shot mode.
pub fn adaptive_threshold(max_conf: f64, sigma_thr: f64, tau: f64, zero_shot: bool) -> f64 {
    if zero_shot && max_conf > tau {
        (3.0 * sigma_thr).min(1.0)
    } else {
        sigma_thr
    }
}

fn mae_for_threshold(outputs: &[(SimilarityMatrix, usize)], t: f64) -> f64 {
    let total: f64 = outputs
        .iter()
        .map(|(sm, gt)| (count_from_similarity(sm, t).count as f64 - *gt as f64).abs())
        .sum();
    total / outputs.len() as f64
}

fn mae_for_adaptive(outputs: &[(SimilarityMatrix, usize)], sigma: f64, tau: f64) -> f64 {
    let total: f64 = outputs
        .iter()
        .map(|(sm, gt)| {
            let t = adaptive_threshold(sm.max_confidence(), sigma, tau, true);
            (count_from_similarity(sm, t).count as f64 - *gt as f64).abs()
        })
        .sum();
    total / outputs.len() as f64
}

/// Grid search for the base threshold (counting MAE on the holdout, ties
/// to the smallest grid value), then for tau with the zero-shot adaptive
/// rule active at the chosen base threshold.
pub fn calibrate_threshold(
    outputs: &[(SimilarityMatrix, usize)],
    grid: &[f64],
    seed: u64,
) -> Result<CalibrationResult> {
    if outputs.is_empty() {
        return Err(Error::arg("calibrate_threshold", "empty calibration set".to_string()));
    }
    if grid.is_empty() {
        return Err(Error::arg("calibrate_threshold", "empty grid".to_string()));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::arg("calibrate_threshold", "grid values must lie in [0, 1]".to_string()));
    }
    let mut sigma = grid[0];
    let mut best = f64::INFINITY;
    for &t in grid {
        let mae = mae_for_threshold(outputs, t);
        if mae < best {
            best = mae;
            sigma = t;
        }
    }
    let mut tau = grid[0];
    let mut best_tau = f64::INFINITY;
    for &t in grid {
        let mae = mae_for_adaptive(outputs, sigma, t);
        if mae < best_tau {
            best_tau = mae;
            tau = t;
        }
    }
    Ok(CalibrationResult {
        sigma_thr: sigma,
        tau,
        mae: best,
        grid: grid.to_vec(),
        seed,
    })
}

/// MAE and RMSE over paired counts.
pub fn mae_rmse(preds: &[f64], gts: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::arg(
            "mae_rmse",
            format!("got {} predictions and {} ground truths", preds.len(), gts.len()),
        ));
    }
    let n = preds.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "few-shot")]
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub samples: usize,
}

/// Per-class and pooled counting error. Pooled metrics run over the full
/// sample list jointly, never over class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub pooled_mae: f64,
    pub pooled_rmse: f64,
    pub samples: usize,
    /// Base threshold the run used, when known.
    pub sigma_thr: Option<f64>,
    /// Zero-shot tripling constant, when applicable.
    pub tau: Option<f64>,
}

/// Builds the per-class/pooled report from (class, predicted, true) count
/// triples. Classes report in lexicographic order.
pub fn per_class_report(results: &[(String, usize, usize)], mode: EvalMode) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::arg("per_class_report", "no results".to_string()));
    }
    let mut by_class: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all_preds = Vec::with_capacity(results.len());
    let mut all_gts = Vec::with_capacity(results.len());
    for (class, pred, gt) in results {
        let entry = by_class.entry(class.clone()).or_default();
        entry.0.push(*pred as f64);
        entry.1.push(*gt as f64);
        all_preds.push(*pred as f64);
        all_gts.push(*gt as f64);
    }
    let mut per_class = BTreeMap::new();
    for (class, (preds, gts)) in by_class {
        let (mae, rmse) = mae_rmse(&preds, &gts)?;
        per_class.insert(
            class,
            ClassMetrics {
                mae: round6(mae),
                rmse: round6(rmse),
                samples: preds.len(),
            },
        );
    }
    let (pooled_mae, pooled_rmse) = mae_rmse(&all_preds, &all_gts)?;
    Ok(EvalReport {
        mode,
        per_class,
        pooled_mae: round6(pooled_mae),
        pooled_rmse: round6(pooled_rmse),
        samples: results.len(),
        sigma_thr: None,
        tau: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    pub mean_abs_err: f64,
    pub std_abs_err: f64,
}

/// Equal-count bins of absolute error by ground-truth count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub bins: Vec<DensityBin>,
}

/// Quantile binning: sort by ground-truth count (stable, so input order
/// breaks ties), split into `bins` bins whose sizes differ by at most one
/// (the remainder goes to the earliest bins), and report the mean and
/// population standard deviation of the absolute error per bin.
pub fn quantile_bins(samples: &[(f64, f64)], bins: usize) -> Result<DensityCurve> {
    if bins == 0 {
        return Err(Error::arg("quantile_bins", "need at least one bin".to_string()));
    }
    if samples.len() < bins {
        return Err(Error::arg(
            "quantile_bins",
            format!("{} samples cannot fill {} bins", samples.len(), bins),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("counts are finite"));
    let base = sorted.len() / bins;
    let remainder = sorted.len() % bins;
    let mut out = Vec::with_capacity(bins);
    let mut offset = 0;
    for b in 0..bins {
        let size = base + usize::from(b < remainder);
        let chunk = &sorted[offset..offset + size];
        offset += size;
        let mean = chunk.iter().map(|(_, e)| e).sum::<f64>() / size as f64;
        let var = chunk.iter().map(|(_, e)| (e - mean) * (e - mean)).sum::<f64>() / size as f64;
        out.push(DensityBin {
            lo: chunk[0].0,
            hi: chunk[size - 1].0,
            samples: size,
            mean_abs_err: mean,
            std_abs_err: var.sqrt(),
        });
    }
    Ok(DensityCurve { bins: out })
}

/// Writes the density curve as CSV: bin_lo, bin_hi, n, mean_abs_err,
/// std_abs_err.
pub fn write_density_csv(path: &Path, curve: &DensityCurve) -> Result<()> {
    let mut text = String::from("bin_lo,bin_hi,n,mean_abs_err,std_abs_err\n");
    for b in &curve.bins {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            b.lo,
            b.hi,
            b.samples,
            round6(b.mean_abs_err),
            round6(b.std_abs_err)
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rasterizes per-token confidences (max over prompt columns) onto the
/// fused grid and writes `<stem>.csv` (row-major floats) plus
/// `<stem>.pgm` (binary 8-bit, linear scale with the maximum at 255).
/// Cells covered by several tokens keep the largest confidence.
pub fn export_confidence_map(
    sm: &SimilarityMatrix,
    grid: &TokenGrid,
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let (h, w) = grid.grid;
    let mut raster = vec![0.0f64; h * w];
    for (row, &token) in sm.selected.iter().enumerate() {
        let (r, c) = *grid.positions.get(token).ok_or_else(|| {
            Error::arg(
                "export_confidence_map",
                format!("token {} has no grid position", token),
            )
        })?;
        let conf = sm.token_confidence(row);
        let cell = &mut raster[r * w + c];
        if conf > *cell {
            *cell = conf;
        }
    }

    let csv_path = stem.with_extension("csv");
    let mut csv = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{}", raster[r * w + c])).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let max = raster.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pgm_path = stem.with_extension("pgm");
    let mut pgm = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    pgm.extend(raster.iter().map(|&v| (v * scale).round() as u8));
    std::fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;
    Ok((csv_path, pgm_path))
}
