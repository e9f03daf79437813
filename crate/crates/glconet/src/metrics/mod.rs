//! Binary-segmentation evaluation suite: MAE, PR/F-measure curves, adaptive
//! and weighted F-measure, S-measure and E-measure, plus directory-level
//! evaluation with CSV output.

mod s_measure;
mod weighted_f;

pub use s_measure::s_measure;
pub use weighted_f::{edt_with_nearest, weighted_f_with, WfConfig};

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image;
use crate::kernels;
use crate::tensor::Tensor;

/// F-measure precision emphasis used throughout.
pub const F_BETA2: f64 = 0.3;

/// A prediction map in [0,1] and a binary mask at equal extents, both rank-2
/// [h, w].
#[derive(Clone, Debug)]
pub struct MaskPair {
    pred: Tensor,
    gt: Tensor,
}

impl MaskPair {
    pub fn new(pred: Tensor, gt: Tensor) -> Result<Self> {
        let pe = pred.dims2()?;
        let ge = gt.dims2()?;
        if pe != ge {
            return Err(Error::dim("mask_pair", format!("prediction {pe:?} vs mask {ge:?}")));
        }
        if pred.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("mask_pair", "prediction outside [0,1]"));
        }
        if !gt.is_binary() {
            return Err(Error::contract("mask_pair", "mask is not binary"));
        }
        Ok(MaskPair { pred, gt })
    }

    /// Resizes the prediction bilinearly to the mask's extents first.
    pub fn resized(pred: Tensor, gt: Tensor) -> Result<Self> {
        let (ph, pw) = pred.dims2()?;
        let (gh, gw) = gt.dims2()?;
        if (ph, pw) == (gh, gw) {
            return MaskPair::new(pred, gt);
        }
        let as4 = pred.reshaped(vec![1, 1, ph, pw])?;
        let up = kernels::bilinear_forward(&as4, gh, gw)?;
        MaskPair::new(up.reshaped(vec![gh, gw])?, gt)
    }

    pub fn pred(&self) -> &Tensor {
        &self.pred
    }

    pub fn gt(&self) -> &Tensor {
        &self.gt
    }

    pub fn extents(&self) -> (usize, usize) {
        let (h, w) = self.pred.dims2().expect("rank 2");
        (h, w)
    }

    /// Jointly transposed pair (metric invariance probe).
    pub fn transposed(&self) -> MaskPair {
        let (h, w) = self.extents();
        let tp = kernels::transpose(self.pred.data(), h, w);
        let tg = kernels::transpose(self.gt.data(), h, w);
        MaskPair {
            pred: Tensor::new(vec![w, h], tp).unwrap(),
            gt: Tensor::new(vec![w, h], tg).unwrap(),
        }
    }
}

// ── Scalar metrics ───────────────────────────────────────────────────

pub fn mae(pair: &MaskPair) -> f64 {
    let n = pair.pred.numel() as f64;
    pair.pred
        .data()
        .iter()
        .zip(pair.gt.data())
        .map(|(&p, &g)| (p - g).abs())
        .sum::<f64>()
        / n
}

fn f_beta(precision: f64, recall: f64) -> f64 {
    let denom = F_BETA2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + F_BETA2) * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CurveRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Clone, Debug)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

/// 256-threshold PR/F table: binarize P >= t for t = k/255.
///
/// Empty-prediction precision and empty-mask recall are defined as 1.
pub fn pr_curve(pair: &MaskPair) -> CurveTable {
    let n = pair.pred.numel();
    let mut order: Vec<usize> = (0..n).collect();
    let p = pair.pred.data();
    let g = pair.gt.data();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
    // suffix_fg[i] = foreground count among sorted[i..].
    let mut suffix_fg = vec![0usize; n + 1];
    for i in (0..n).rev() {
        suffix_fg[i] = suffix_fg[i + 1] + (g[order[i]] == 1.0) as usize;
    }
    let total_fg = suffix_fg[0];
    let sorted_p: Vec<f64> = order.iter().map(|&i| p[i]).collect();

    let rows = (0..256)
        .map(|k| {
            let t = k as f64 / 255.0;
            let cut = sorted_p.partition_point(|&v| v < t);
            let predicted = n - cut;
            let tp = suffix_fg[cut];
            let precision = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
            let recall = if total_fg == 0 { 1.0 } else { tp as f64 / total_fg as f64 };
            CurveRow { threshold: t, precision, recall, f_measure: f_beta(precision, recall) }
        })
        .collect();
    CurveTable { rows }
}

/// F-measure at the adaptive threshold t* = min(1, 2*mean(P)), binarizing
/// strictly above t* so an all-zero prediction scores 0.
pub fn adaptive_f(pair: &MaskPair) -> f64 {
    let t = (2.0 * pair.pred.mean()).min(1.0);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pair.pred.data().iter().zip(pair.gt.data()) {
        let pos = p > t;
        match (pos, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    f_beta(precision, recall)
}

pub fn weighted_f(pair: &MaskPair) -> f64 {
    weighted_f_with(pair, &WfConfig::default())
}

// ── E-measure ────────────────────────────────────────────────────────

const XI_EPS: f64 = 1e-16;

/// Enhanced-alignment value for one pixel's centered values.
pub fn alignment(phi_p: f64, phi_g: f64) -> f64 {
    2.0 * phi_p * phi_g / (phi_p * phi_p + phi_g * phi_g + XI_EPS)
}

/// Mean enhanced-alignment score. Degenerate masks: all-background uses the
/// 1-P map, all-foreground uses P itself.
pub fn e_measure(pair: &MaskPair) -> f64 {
    let n = pair.pred.numel() as f64;
    let gt_mean = pair.gt.mean();
    if gt_mean == 0.0 {
        return pair.pred.data().iter().map(|&p| 1.0 - p).sum::<f64>() / n;
    }
    if gt_mean == 1.0 {
        return pair.pred.mean();
    }
    let p_mean = pair.pred.mean();
    pair.pred
        .data()
        .iter()
        .zip(pair.gt.data())
        .map(|(&p, &g)| {
            let xi = alignment(p - p_mean, g - gt_mean);
            (xi + 1.0) * (xi + 1.0) / 4.0
        })
        .sum::<f64>()
        / n
}

// ── Directory evaluation ─────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub name: String,
    pub mae: f64,
    pub adaptive_f: f64,
    pub weighted_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
}

#[derive(Clone, Debug)]
pub struct EvalTable {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    /// Per-threshold precision/recall averaged over images; F from the
    /// averaged pair.
    pub mean_curve: CurveTable,
}

pub fn evaluate_pair(name: &str, pair: &MaskPair) -> (MetricRow, CurveTable) {
    let row = MetricRow {
        name: name.to_string(),
        mae: mae(pair),
        adaptive_f: adaptive_f(pair),
        weighted_f: weighted_f(pair),
        s_measure: s_measure(pair),
        e_measure: e_measure(pair),
    };
    (row, pr_curve(pair))
}

/// Prediction filename for a ground-truth mask: identical name, or the
/// generator's `img_` pairing of a `gt_` mask.
fn prediction_path(pred_dir: &Path, gt_name: &str) -> Option<PathBuf> {
    let direct = pred_dir.join(gt_name);
    if direct.exists() {
        return Some(direct);
    }
    if let Some(suffix) = gt_name.strip_prefix("gt_") {
        let paired = pred_dir.join(format!("img_{suffix}"));
        if paired.exists() {
            return Some(paired);
        }
    }
    None
}

pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path) -> Result<EvalTable> {
    let mut gt_names: Vec<String> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", gt_dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            (name.ends_with(".pgm") && !name.starts_with("img_")).then_some(name)
        })
        .collect();
    gt_names.sort();
    if gt_names.is_empty() {
        return Err(Error::Data(format!("no ground-truth masks (*.pgm) in {}", gt_dir.display())));
    }

    let results: Vec<Result<(MetricRow, CurveTable)>> = gt_names
        .par_iter()
        .map(|name| {
            let pred_path = prediction_path(pred_dir, name)
                .ok_or_else(|| Error::Data(format!("no prediction for {name} in {}", pred_dir.display())))?;
            let (gw, gh, gbytes) = image::read_pgm(&gt_dir.join(name))?;
            let gt = image::gray_to_mask(gw, gh, &gbytes).reshaped(vec![gh, gw])?;
            let (pw, ph, pbytes) = image::read_pgm(&pred_path)?;
            let pred = image::gray_to_map(pw, ph, &pbytes);
            let pair = MaskPair::resized(pred, gt)?;
            Ok(evaluate_pair(name, &pair))
        })
        .collect();

    let mut rows = Vec::with_capacity(gt_names.len());
    let mut curves = Vec::with_capacity(gt_names.len());
    for r in results {
        let (row, curve) = r?;
        rows.push(row);
        curves.push(curve);
    }

    let n = rows.len() as f64;
    let mean = MetricRow {
        name: "mean".to_string(),
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        adaptive_f: rows.iter().map(|r| r.adaptive_f).sum::<f64>() / n,
        weighted_f: rows.iter().map(|r| r.weighted_f).sum::<f64>() / n,
        s_measure: rows.iter().map(|r| r.s_measure).sum::<f64>() / n,
        e_measure: rows.iter().map(|r| r.e_measure).sum::<f64>() / n,
    };
    let mean_curve = CurveTable {
        rows: (0..256)
            .map(|k| {
                let precision = curves.iter().map(|c| c.rows[k].precision).sum::<f64>() / n;
                let recall = curves.iter().map(|c| c.rows[k].recall).sum::<f64>() / n;
                CurveRow { threshold: k as f64 / 255.0, precision, recall, f_measure: f_beta(precision, recall) }
            })
            .collect(),
    };
    Ok(EvalTable { rows, mean, mean_curve })
}

impl EvalTable {
    /// Writes metrics.csv, pr_curve.csv and fm_curve.csv.
    pub fn write_csvs(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut metrics = String::from("name,mae,adaptive_f,weighted_f,s_measure,e_measure\n");
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            metrics.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                row.name, row.mae, row.adaptive_f, row.weighted_f, row.s_measure, row.e_measure
            ));
        }
        std::fs::write(out_dir.join("metrics.csv"), metrics)?;

        let mut pr = String::from("threshold,precision,recall\n");
        let mut fm = String::from("threshold,f_measure\n");
        for row in &self.mean_curve.rows {
            pr.push_str(&format!("{:.6},{:.6},{:.6}\n", row.threshold, row.precision, row.recall));
            fm.push_str(&format!("{:.6},{:.6}\n", row.threshold, row.f_measure));
        }
        std::fs::write(out_dir.join("pr_curve.csv"), pr)?;
        std::fs::write(out_dir.join("fm_curve.csv"), fm)?;
        Ok(())
    }
}
