//! Localization metrics: pixel AP, IoU success rate and AUC for single
//! sources; class-aware AP, permutation-invariant AP and class-aware IoU for
//! mixtures; token classification diagnostics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::avct::TokenClassOutput;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_BIN_THRESHOLD: f64 = 0.5;
pub const SOLO_IOU_THRESHOLD: f64 = 0.5;
pub const MULTI_IOU_THRESHOLD: f64 = 0.3;
pub const MAX_PERMUTATION_SOURCES: usize = 4;

/// IoU thresholds `0, 0.05, …, 1`.
pub fn default_auc_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Maps and masks of one evaluated scene. `maps[n]` is the map produced for
/// the ground-truth class `gt_classes[n]`, scored against `gt_masks[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub maps: Vec<Array2<f64>>,
    pub gt_masks: Vec<Array2<bool>>,
    pub gt_classes: Vec<usize>,
    pub pred_classes: Option<Vec<usize>>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.gt_masks.len();
        if n == 0 || self.maps.len() != n || self.gt_classes.len() != n {
            return invalid("record needs matching, non-empty maps, masks and classes");
        }
        if self.maps.iter().zip(&self.gt_masks).any(|(m, g)| m.dim() != g.dim()) {
            return invalid("map and mask shapes differ");
        }
        if self.maps.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return invalid("map contains non-finite values");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bin_threshold: f64,
    pub iou_threshold: f64,
}

impl MetricConfig {
    pub fn solo() -> Self {
        Self { bin_threshold: DEFAULT_BIN_THRESHOLD, iou_threshold: SOLO_IOU_THRESHOLD }
    }

    pub fn multi() -> Self {
        Self { bin_threshold: DEFAULT_BIN_THRESHOLD, iou_threshold: MULTI_IOU_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub iou_success_rate: f64,
    pub auc: f64,
    pub cap: f64,
    pub piap: f64,
    pub ciou_success_rate: f64,
    pub bin_threshold: f64,
    pub iou_threshold: f64,
    pub auc_thresholds: Vec<f64>,
    pub num_records: usize,
    /// Sources scored across all records.
    pub num_sources: usize,
}

pub fn iou_score(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Min-max normalize to `[0, 1]` (constant maps become all zeros), then
/// keep cells `≥ threshold`.
pub fn binarize_map(map: &Array2<f64>, threshold: f64) -> Array2<bool> {
    let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = hi - lo;
    map.mapv(|v| {
        let norm = if range > 0.0 { (v - lo) / range } else { 0.0 };
        norm >= threshold
    })
}

/// Success rate at `tau_star` and the trapezoidal area under the success
/// curve sampled at `thresholds`.
pub fn success_and_auc(ious: &[f64], tau_star: f64, thresholds: &[f64]) -> Result<(f64, f64)> {
    if ious.is_empty() {
        return invalid("no samples to score");
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return invalid("IoU thresholds must be sorted and lie in [0, 1]");
    }
    let rate = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64;
    let curve: Vec<f64> = thresholds.iter().map(|&t| rate(t)).collect();
    let auc = thresholds
        .windows(2)
        .zip(curve.windows(2))
        .map(|(t, s)| (t[1] - t[0]) * 0.5 * (s[0] + s[1]))
        .sum();
    Ok((rate(tau_star), auc))
}

/// Average precision of a pixel ranking. Ties (including `0.0` vs `-0.0`)
/// keep row-major order. `None` when the mask has no positives.
pub fn pixel_ap(map: &Array2<f64>, gt: &Array2<bool>) -> Option<f64> {
    let values: Vec<f64> = map.iter().copied().collect();
    let labels: Vec<bool> = gt.iter().copied().collect();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Per-category mean pixel AP, averaged over the categories present.
pub fn class_aware_ap(records: &[EvalRecord]) -> f64 {
    let mut per_class: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in records {
        for ((map, mask), &c) in r.maps.iter().zip(&r.gt_masks).zip(&r.gt_classes) {
            if let Some(ap) = pixel_ap(map, mask) {
                per_class.entry(c).or_default().push(ap);
            }
        }
    }
    let class_means: Vec<f64> = per_class.values().map(|v| mean(v)).collect();
    mean(&class_means)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best mean pixel AP over all assignments of maps to masks, per record.
pub fn record_piap(r: &EvalRecord) -> Result<f64> {
    let n = r.maps.len();
    if n > MAX_PERMUTATION_SOURCES {
        return Err(Error::Unsupported(format!(
            "permutation-invariant AP supports at most {MAX_PERMUTATION_SOURCES} sources, got {n}"
        )));
    }
    let table: Vec<Vec<f64>> = r
        .maps
        .iter()
        .map(|m| r.gt_masks.iter().map(|g| pixel_ap(m, g).unwrap_or(0.0)).collect())
        .collect();
    Ok(permutations(n)
        .iter()
        .map(|perm| (0..n).map(|k| table[perm[k]][k]).sum::<f64>() / n as f64)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn permutation_invariant_ap(records: &[EvalRecord]) -> Result<f64> {
    let per: Vec<f64> = records.iter().map(record_piap).collect::<Result<_>>()?;
    Ok(mean(&per))
}

/// Fraction of records whose every source reaches IoU `≥ tau_star`.
pub fn ciou_success(records: &[EvalRecord], bin_threshold: f64, tau_star: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let ok = records
        .iter()
        .filter(|r| {
            r.maps
                .iter()
                .zip(&r.gt_masks)
                .all(|(m, g)| iou_score(&binarize_map(m, bin_threshold), g) >= tau_star)
        })
        .count();
    ok as f64 / records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro precision/recall/F1 of `argmax(e_i) == i`. Categories never
/// predicted contribute precision 0.
pub fn token_diagnostics(out: &TokenClassOutput) -> TokenDiagnostics {
    let c = out.probabilities.nrows();
    let preds: Vec<usize> = out
        .probabilities
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let tp = (preds[k] == k) as usize as f64;
        let predicted = preds.iter().filter(|&&p| p == k).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let c = c.max(1) as f64;
    TokenDiagnostics { precision: p_sum / c, recall: r_sum / c, f1: f_sum / c }
}

/// Everything the aggregate metrics need from one record, so record sets
/// can be scored one record at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub classes: Vec<usize>,
    /// Pixel AP per source; `None` for empty masks.
    pub aps: Vec<Option<f64>>,
    pub ious: Vec<f64>,
    pub piap: f64,
}

pub fn score_record(r: &EvalRecord, bin_threshold: f64) -> Result<RecordScores> {
    r.validate()?;
    let aps = r.maps.iter().zip(&r.gt_masks).map(|(m, g)| pixel_ap(m, g)).collect();
    let ious = r
        .maps
        .iter()
        .zip(&r.gt_masks)
        .map(|(m, g)| iou_score(&binarize_map(m, bin_threshold), g))
        .collect();
    Ok(RecordScores { classes: r.gt_classes.clone(), aps, ious, piap: record_piap(r)? })
}

/// Combines per-record scores into a report; equals [`evaluate_records`]
/// on the same records.
pub fn aggregate_scores(scores: &[RecordScores], cfg: &MetricConfig) -> Result<EvalReport> {
    if scores.is_empty() {
        return invalid("empty record set");
    }
    let aps: Vec<f64> = scores.iter().flat_map(|s| s.aps.iter().flatten().copied()).collect();
    let ious: Vec<f64> = scores.iter().flat_map(|s| s.ious.iter().copied()).collect();
    let thresholds = default_auc_thresholds();
    let (success, auc) = success_and_auc(&ious, cfg.iou_threshold, &thresholds)?;
    let mut per_class: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for s in scores {
        for (&c, ap) in s.classes.iter().zip(&s.aps) {
            if let Some(ap) = ap {
                per_class.entry(c).or_default().push(*ap);
            }
        }
    }
    let class_means: Vec<f64> = per_class.values().map(|v| mean(v)).collect();
    let joint = scores.iter().filter(|s| s.ious.iter().all(|&v| v >= cfg.iou_threshold)).count();
    Ok(EvalReport {
        ap: mean(&aps),
        iou_success_rate: success,
        auc,
        cap: mean(&class_means),
        piap: mean(&scores.iter().map(|s| s.piap).collect::<Vec<_>>()),
        ciou_success_rate: joint as f64 / scores.len() as f64,
        bin_threshold: cfg.bin_threshold,
        iou_threshold: cfg.iou_threshold,
        auc_thresholds: thresholds,
        num_records: scores.len(),
        num_sources: ious.len(),
    })
}

/// Scores every metric over a record set.
pub fn evaluate_records(records: &[EvalRecord], cfg: &MetricConfig) -> Result<EvalReport> {
    let scores: Vec<RecordScores> =
        records.iter().map(|r| score_record(r, cfg.bin_threshold)).collect::<Result<_>>()?;
    aggregate_scores(&scores, cfg)
}
