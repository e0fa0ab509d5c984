//! Region metrics over binary masks: IoU, overall and mean IoU,
//! precision at overlap thresholds, and mAP.

use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};

/// Thresholds reported as precision@K, in hundredths.
pub const PRECISION_THRESHOLDS: [u32; 5] = [50, 60, 70, 80, 90];
/// Thresholds averaged into mAP, in hundredths.
pub const MAP_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

fn counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(dim_err!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
    }
    Ok(pred.iter().zip(gt).fold((0, 0), |(i, u), (&p, &g)| {
        (i + usize::from(p && g), u + usize::from(p || g))
    }))
}

/// Both masks empty counts as a perfect rejection.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, u) = counts(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub overall_iou: f64,
    pub mean_iou: f64,
    /// `(K, fraction of samples with IoU > K)` for K in 0.5..=0.9.
    pub precision_at: Vec<(f64, f64)>,
    pub map: f64,
}

fn above(ious: &[f64], hundredths: u32) -> usize {
    let k = f64::from(hundredths) / 100.0;
    ious.iter().filter(|&&v| v > k).count()
}

fn precision(ious: &[f64], hundredths: u32) -> f64 {
    above(ious, hundredths) as f64 / ious.len() as f64
}

/// One sample per mask pair; callers pass every frame of every video.
pub fn evaluate(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(dim_err!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut ious = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = counts(p, g)?;
        inter += i;
        union += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let n = ious.len() as f64;
    let precision_at = PRECISION_THRESHOLDS
        .iter()
        .map(|&k| (f64::from(k) / 100.0, precision(&ious, k)))
        .collect();
    // integer counts keep mAP <= P@0.5 exact
    let hits: usize = MAP_THRESHOLDS.iter().map(|&k| above(&ious, k)).sum();
    let map = hits as f64 / (MAP_THRESHOLDS.len() * ious.len()) as f64;
    Ok(MetricReport {
        samples: ious.len(),
        overall_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        mean_iou: ious.iter().sum::<f64>() / n,
        precision_at,
        map,
    })
}

impl MetricReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .precision_at
            .iter()
            .map(|(k, v)| (format!("P@{k:.1}"), *v))
            .collect();
        rows.push(("mAP".into(), self.map));
        rows.push(("overall_iou".into(), self.overall_iou));
        rows.push(("mean_iou".into(), self.mean_iou));
        rows
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12} {:>8}\n", "samples", self.samples);
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k:<12} {v:>8.4}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}
