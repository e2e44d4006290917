//! Evaluation: per-source maps selected by ground-truth class, scored with
//! the metric suite, plus the random-map Monte-Carlo baseline.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::visual_grid;
use crate::error::{invalid, Result};
use crate::frontend::FRAME_SIZE;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::model::{Batch, Model};
use crate::localize::upsample_bilinear;
use crate::metrics::{aggregate_scores, score_record, EvalRecord, EvalReport, MetricConfig, RecordScores};
use crate::synth::{Dataset, ManifestRecord};

const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Solo,
    Multi,
}

impl EvalMode {
    pub fn for_sources(n: usize) -> Self {
        if n <= 1 {
            Self::Solo
        } else {
            Self::Multi
        }
    }
}

/// Checks that every record has the same source count, consistent with
/// `mode`, and returns it.
pub fn dataset_sources(dataset: &Dataset, mode: Option<EvalMode>) -> Result<usize> {
    let Some(first) = dataset.records.first() else {
        return invalid("evaluation manifest is empty");
    };
    let n = first.n_sources();
    if dataset.records.iter().any(|r| r.n_sources() != n) {
        return invalid("evaluation manifest mixes source counts");
    }
    if let Some(mode) = mode {
        if mode != EvalMode::for_sources(n) {
            return invalid(format!("{mode:?} evaluation requested on scenes with {n} source(s)"));
        }
    }
    Ok(n)
}

fn gt_masks(r: &ManifestRecord) -> Vec<Array2<bool>> {
    r.boxes.iter().map(|b| b.mask(FRAME_SIZE, r.image_width())).collect()
}

/// Image-resolution maps for each source of each record in `records`.
pub fn predict_records(model: &Model, dataset: &Dataset, records: &[&ManifestRecord]) -> Result<Vec<EvalRecord>> {
    let c = model.config.num_categories;
    let batch = Batch::load(dataset, records, c)?;
    let outputs = model.infer(&batch)?;
    records
        .iter()
        .zip(outputs)
        .map(|(r, out)| {
            let size = (FRAME_SIZE, r.image_width());
            let maps = r
                .categories
                .iter()
                .map(|&cat| upsample_bilinear(&out.feature_map(cat)?, size))
                .collect::<Result<Vec<_>>>()?;
            let pred_classes = out.presence.as_ref().map(crate::grouping::predicted_categories);
            Ok(EvalRecord { maps, gt_masks: gt_masks(r), gt_classes: r.categories.clone(), pred_classes })
        })
        .collect()
}

pub fn evaluate_model(model: &Model, dataset: &Dataset, mode: Option<EvalMode>) -> Result<EvalReport> {
    let n = dataset_sources(dataset, mode)?;
    let cfg = model.config.metric_config(n);
    if let Some(r) = dataset.records.iter().find(|r| r.categories.iter().any(|&c| c >= model.config.num_categories)) {
        return invalid(format!("record {} has categories beyond the model's {}", r.seed, model.config.num_categories));
    }
    let mut scores: Vec<RecordScores> = Vec::with_capacity(dataset.len());
    let all: Vec<&ManifestRecord> = dataset.records.iter().collect();
    for chunk in all.chunks(EVAL_BATCH) {
        for rec in predict_records(model, dataset, chunk)? {
            scores.push(score_record(&rec, cfg.bin_threshold)?);
        }
    }
    aggregate_scores(&scores, &cfg)
}

pub fn evaluate(ckpt: &Checkpoint, manifest: &Path, mode: Option<EvalMode>) -> Result<EvalReport> {
    evaluate_model(&ckpt.model()?, &Dataset::open(manifest)?, mode)
}

/// Scores maps of i.i.d. uniform noise on the feature grid, upsampled like
/// model maps, pooled over `draws` passes through the test set.
pub fn random_map_baseline(dataset: &Dataset, cfg: &MetricConfig, draws: usize, seed: u64) -> Result<EvalReport> {
    dataset_sources(dataset, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(draws * dataset.len());
    for _ in 0..draws {
        for r in &dataset.records {
            let size = (FRAME_SIZE, r.image_width());
            let grid = visual_grid(size.0, size.1);
            let maps = (0..r.n_sources())
                .map(|_| upsample_bilinear(&Array2::from_shape_fn(grid, |_| rng.gen::<f64>()), size))
                .collect::<Result<Vec<_>>>()?;
            let rec = EvalRecord { maps, gt_masks: gt_masks(r), gt_classes: r.categories.clone(), pred_classes: None };
            scores.push(score_record(&rec, cfg.bin_threshold)?);
        }
    }
    aggregate_scores(&scores, cfg)
}
