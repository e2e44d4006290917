//! Training loop with per-epoch logging, checkpointing and divergence abort.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat};
use crate::error::{invalid, Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::model::{Batch, Model};
use crate::harness::optim::Adam;
use crate::metrics::token_diagnostics;
use crate::synth::Dataset;

/// Keeps the shuffling/noise stream apart from the initialization stream.
const TRAIN_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loc_loss: f64,
    pub group_loss: f64,
    pub total_loss: f64,
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub loc: f64,
    pub group: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let optimizer = Adam::new(model.config.learning_rate, &model.params);
        let rng = Self::epoch_rng(&model.config, 0);
        Ok(Self { model, optimizer, epoch: 0, rng })
    }

    /// Continues from a checkpoint. The data stream restarts from the
    /// checkpoint's epoch, so resumed runs match uninterrupted ones.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        t.model = ckpt.model()?;
        t.optimizer = ckpt.optimizer.clone();
        t.epoch = ckpt.epoch;
        t.rng = Self::epoch_rng(&ckpt.config, ckpt.epoch);
        Ok(t)
    }

    fn epoch_rng(config: &RunConfig, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        rng.set_stream(TRAIN_STREAM);
        rng
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, &self.optimizer, self.epoch)
    }

    /// One optimizer step. A non-finite loss leaves the parameters as they
    /// were and reports divergence.
    pub fn step(&mut self, batch: &Batch) -> Result<StepLoss> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let fwd = self.model.forward(&mut g, &p, batch, Some(&mut self.rng))?;
        let loss = self.model.loss(&mut g, &p, &fwd, &batch.labels);
        let values = StepLoss {
            loc: g.scalar(loss.loc),
            group: loss.group.map_or(0.0, |v| g.scalar(v)),
            total: g.scalar(loss.total),
        };
        if !values.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                detail: format!("loss {} (loc {}, group {})", values.total, values.loc, values.group),
            });
        }
        let mut grads = g.backward(loss.total);
        let grads: Vec<Option<Mat>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        if grads.iter().flatten().any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { epoch: self.epoch + 1, detail: "non-finite gradient".into() });
        }
        drop(p);
        self.optimizer.step(&mut self.model.params, &grads);
        Ok(values)
    }

    /// One pass over `dataset` in a seeded order.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochLog> {
        if dataset.is_empty() {
            return invalid("training manifest is empty");
        }
        self.rng = Self::epoch_rng(&self.model.config, self.epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loc, mut group, mut total, mut count) = (0.0, 0.0, 0.0, 0.0);
        let c = self.model.config.num_categories;
        for chunk in order.chunks(self.model.config.batch_size) {
            let records: Vec<_> = chunk.iter().map(|&i| &dataset.records[i]).collect();
            let batch = Batch::load(dataset, &records, c)?;
            let s = self.step(&batch)?;
            let w = batch.len() as f64;
            loc += w * s.loc;
            group += w * s.group;
            total += w * s.total;
            count += w;
        }
        self.epoch += 1;
        let diag = token_diagnostics(&self.model.token_output()?);
        Ok(EpochLog {
            epoch: self.epoch,
            loc_loss: loc / count,
            group_loss: group / count,
            total_loss: total / count,
            token_precision: diag.precision,
            token_recall: diag.recall,
            token_f1: diag.f1,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Rewritten after every finite epoch, so a divergent run leaves the
    /// last good state behind.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines epoch log.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn train(config: &RunConfig, manifest: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    train_with(config, manifest, opts, |_| {})
}

/// [`train`] with a callback invoked after each epoch.
pub fn train_with(
    config: &RunConfig,
    manifest: &Path,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let dataset = Dataset::open(manifest)?;
    if let Some(r) = dataset.records.iter().find(|r| r.categories.iter().any(|&c| c >= config.num_categories)) {
        return invalid(format!("record {} uses categories beyond 0..{}", r.seed, config.num_categories));
    }
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(path) = &opts.checkpoint {
        trainer.checkpoint().save(path)?;
    }
    let mut log_file = match &opts.log {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let entry = trainer.run_epoch(&dataset)?;
        if let Some(path) = &opts.checkpoint {
            trainer.checkpoint().save(path)?;
        }
        if let Some(f) = log_file.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), log })
}
