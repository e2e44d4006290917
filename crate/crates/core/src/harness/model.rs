//! The full network assembled from its parts, with the ablation switches
//! deciding which parts take part in the forward pass and the loss.
//!
//! Wiring per switch setting:
//! - neither: contrastive loss on raw encoder features;
//! - tokens only: attention over `[features; tokens]` plus token
//!   cross-entropy, contrastive loss on the attended features;
//! - grouping only: grouping of raw features with the raw token bank,
//!   class-aware localization loss plus presence BCE;
//! - both: the complete objective.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::avct::{token_ce_graph, token_class_logits, AttentionStack, ClassTokens, ClassifierWeights, TokenClassOutput};
use crate::encoders::{audio_input, default_widths, visual_input, ConvEncoder};
use crate::error::{invalid, Error, Result};
use crate::frontend::{stft_log_spectrogram, Image, StftParams, Waveform};
use crate::grouping::{
    assignment_graph, group_graph, gumbel_noise, presence_graph, AssignmentMode, GroupedEmbeddings, SourcePresence,
};
use crate::harness::config::RunConfig;
use crate::localize::similarity_map;
use crate::objective::{bce_graph, localization_graph, micl_graph, SlotBatch};
use crate::params::{normal_mat, Bound, ParamStore};
use crate::synth::{label_vector, Dataset, ManifestRecord, SceneSample};

pub const TOKENS: &str = "tokens";
pub const CLASSIFIER_W: &str = "classifier.w";
pub const CLASSIFIER_B: &str = "classifier.b";
pub const MODALITIES: [&str; 2] = ["audio", "visual"];

fn grouping_name(modality: &str, which: &str) -> String {
    format!("group_{modality}.{which}")
}

fn presence_name(modality: &str, which: &str) -> String {
    format!("presence_{modality}.{which}")
}

/// Model inputs for a batch of scenes sharing one geometry.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Standardized spectrograms, `B·F·T × 1`.
    pub audio: Mat,
    /// Centred frames, `B·H·W × 3`.
    pub visual: Mat,
    pub spec_size: (usize, usize),
    pub image_size: (usize, usize),
    /// Ground-truth categories per scene, in source order.
    pub categories: Vec<Vec<usize>>,
    pub labels: Vec<Vec<u8>>,
}

impl Batch {
    pub fn from_parts(waves: &[Waveform], images: &[Image], categories: &[Vec<usize>], num_categories: usize) -> Result<Self> {
        if waves.is_empty() || waves.len() != images.len() || waves.len() != categories.len() {
            return invalid("batch needs equally many waveforms, images and label sets");
        }
        let mut audio = Vec::new();
        let mut visual = Vec::new();
        let mut spec_size = None;
        let image_size = (images[0].height(), images[0].width());
        for (w, img) in waves.iter().zip(images) {
            let spec = stft_log_spectrogram(w, StftParams::default())?;
            let size = (spec.freq_bins(), spec.frames());
            if *spec_size.get_or_insert(size) != size {
                return invalid("clips in a batch must have equal length");
            }
            if (img.height(), img.width()) != image_size {
                return invalid("frames in a batch must have equal size");
            }
            audio.extend(audio_input(&spec)?);
            visual.extend(visual_input(img)?);
        }
        let mut labels = Vec::with_capacity(categories.len());
        for cats in categories {
            if cats.is_empty() || cats.iter().any(|&c| c >= num_categories) {
                return invalid(format!("categories {cats:?} outside 0..{num_categories}"));
            }
            labels.push(label_vector(cats, num_categories));
        }
        let b = waves.len();
        let (h, w) = image_size;
        Ok(Self {
            audio: Mat::from_shape_vec((audio.len(), 1), audio).expect("column"),
            visual: Mat::from_shape_vec((b * h * w, 3), visual).expect("rows"),
            spec_size: spec_size.expect("non-empty"),
            image_size,
            categories: categories.to_vec(),
            labels,
        })
    }

    pub fn from_samples(samples: &[SceneSample], num_categories: usize) -> Result<Self> {
        let waves: Vec<Waveform> = samples.iter().map(|s| s.mixture.clone()).collect();
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        let cats: Vec<Vec<usize>> = samples.iter().map(SceneSample::categories).collect();
        Self::from_parts(&waves, &images, &cats, num_categories)
    }

    pub fn load(dataset: &Dataset, records: &[&ManifestRecord], num_categories: usize) -> Result<Self> {
        let mut waves = Vec::with_capacity(records.len());
        let mut images = Vec::with_capacity(records.len());
        for r in records {
            waves.push(dataset.load_audio(r)?);
            images.push(dataset.load_image(r)?);
        }
        let cats: Vec<Vec<usize>> = records.iter().map(|r| r.categories.clone()).collect();
        Self::from_parts(&waves, &images, &cats, num_categories)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Grouped embeddings and presence probabilities of one scene.
#[derive(Debug, Clone, Copy)]
pub struct GroupedVars {
    pub audio: Var,
    pub visual: Var,
    pub p_audio: Var,
    pub p_visual: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub raw_visual: Var,
    /// `1×D` audio feature entering localization (attended if tokens are on).
    pub audio: Var,
    pub visual: Var,
    pub grouped: Option<GroupedVars>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub samples: Vec<SampleVars>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub loc: Var,
    pub group: Option<Var>,
}

/// Inference values of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub grid: (usize, usize),
    pub raw_visual: Mat,
    pub audio: Mat,
    pub visual: Mat,
    pub grouped: Option<GroupedEmbeddings>,
    pub presence: Option<SourcePresence>,
}

impl SampleOutput {
    /// Feature-grid localization map for `category`. Without grouping every
    /// category shares the single audio-visual similarity map.
    pub fn feature_map(&self, category: usize) -> Result<Array2<f64>> {
        match &self.grouped {
            Some(gr) => {
                if category >= gr.audio.nrows() {
                    return invalid(format!("category {category} outside the token bank"));
                }
                let row = |m: &Mat| m.row(category).to_owned().insert_axis(ndarray::Axis(0));
                similarity_map(&row(&gr.audio), &self.raw_visual, &row(&gr.visual), self.grid)
            }
            None => similarity_map(&self.audio, &self.visual, &Mat::ones((1, self.visual.ncols())), self.grid),
        }
    }

    /// `(audio, visual)` embedding of `category`: the grouped vectors, or
    /// the global audio feature and mean visual feature without grouping.
    pub fn embedding(&self, category: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.grouped {
            Some(gr) => {
                if category >= gr.audio.nrows() {
                    return invalid(format!("category {category} outside the token bank"));
                }
                Ok((gr.audio.row(category).to_vec(), gr.visual.row(category).to_vec()))
            }
            None => Ok((
                self.audio.row(0).to_vec(),
                self.visual.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
    audio_encoder: ConvEncoder,
    visual_encoder: ConvEncoder,
    audio_stack: AttentionStack,
    visual_stack: AttentionStack,
}

impl Model {
    fn architecture(config: &RunConfig) -> (ConvEncoder, ConvEncoder, AttentionStack, AttentionStack) {
        let widths = default_widths(config.dim);
        (
            ConvEncoder::new("audio", 1, widths.clone()),
            ConvEncoder::new("visual", 3, widths),
            AttentionStack::new("attn_audio", config.dim, config.depth, config.block),
            AttentionStack::new("attn_visual", config.dim, config.depth, config.block),
        )
    }

    /// Freshly initialized parameters, seeded by `config.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (audio_encoder, visual_encoder, audio_stack, visual_stack) = Self::architecture(&config);
        let (c, d) = (config.num_categories, config.dim);
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        audio_encoder.init(&mut params, &mut rng);
        visual_encoder.init(&mut params, &mut rng);
        params.insert(TOKENS, ClassTokens::init(&mut rng, c, d).tokens);
        audio_stack.init(&mut params, &mut rng);
        visual_stack.init(&mut params, &mut rng);
        params.insert(CLASSIFIER_W, normal_mat(&mut rng, d, c, std));
        params.insert(CLASSIFIER_B, Mat::zeros((1, c)));
        for m in MODALITIES {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                params.insert(grouping_name(m, w), normal_mat(&mut rng, d, d, std));
            }
            params.insert(presence_name(m, "w"), normal_mat(&mut rng, d, 1, std));
            params.insert(presence_name(m, "b"), Mat::zeros((1, 1)));
        }
        Ok(Self { config, params, audio_encoder, visual_encoder, audio_stack, visual_stack })
    }

    /// Wraps stored parameters, checking names and shapes against `config`.
    pub fn from_params(config: RunConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config)?;
        if template.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the configured architecture".into()));
        }
        for ((name, want), got) in template.params.iter().zip(params.values()) {
            if want.dim() != got.dim() {
                return Err(Error::Checkpoint(format!("{name} is {:?}, expected {:?}", got.dim(), want.dim())));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn token_output(&self) -> Result<TokenClassOutput> {
        let head = ClassifierWeights {
            w: self.params.get(CLASSIFIER_W).clone(),
            b: self.params.get(CLASSIFIER_B).clone(),
        };
        token_class_logits(&ClassTokens { tokens: self.params.get(TOKENS).clone() }, &head)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (h, w) = batch.image_size;
        crate::encoders::validate_frame(&Image::filled(h, w, 0.0))?;
        if batch.labels.iter().any(|l| l.len() != self.config.num_categories) {
            return invalid("label vectors do not match the configured category count");
        }
        Ok(())
    }

    /// Builds the forward pass. `noise_rng` draws Gumbel noise for hard
    /// assignment during training; inference passes `None`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, noise_rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        self.check_batch(batch)?;
        let b = batch.len();
        let (fh, ft) = batch.spec_size;
        let (ih, iw) = batch.image_size;
        let ax = g.constant(batch.audio.clone());
        let (ay, ah, aw) = self.audio_encoder.forward(g, p, ax, b, fh, ft);
        if ah * aw == 0 {
            return invalid("spectrogram too small for the audio encoder");
        }
        let audio = g.group_mean_rows(ay, ah * aw);
        let vx = g.constant(batch.visual.clone());
        let (vy, vh, vw) = self.visual_encoder.forward(g, p, vx, b, ih, iw);
        self.forward_features(g, p, audio, vy, (vh, vw), noise_rng)
    }

    /// Everything after the encoders: `audio` is `B×D`, `visual` stacks
    /// `B` grids of `grid.0·grid.1` rows.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        p: &Bound,
        audio: Var,
        visual: Var,
        grid: (usize, usize),
        mut noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let c = cfg.num_categories;
        let b = g.shape(audio).0;
        let npos = grid.0 * grid.1;
        if npos == 0 || g.shape(visual) != (b * npos, cfg.dim) || g.shape(audio).1 != cfg.dim {
            return invalid(format!(
                "features {:?} / {:?} do not match {b} scenes of a {grid:?} grid at D={}",
                g.shape(audio),
                g.shape(visual),
                cfg.dim
            ));
        }
        let tokens = p.var(TOKENS);

        let mut samples = Vec::with_capacity(b);
        for i in 0..b {
            let fa = g.slice_rows(audio, i, 1);
            let fv = g.slice_rows(visual, i * npos, npos);
            let (ha, ta, hv, tv) = if cfg.avct {
                let xa = g.concat_rows(&[fa, tokens]);
                let ya = self.audio_stack.forward(g, p, xa);
                let xv = g.concat_rows(&[fv, tokens]);
                let yv = self.visual_stack.forward(g, p, xv);
                (g.slice_rows(ya, 0, 1), g.slice_rows(ya, 1, c), g.slice_rows(yv, 0, npos), g.slice_rows(yv, npos, c))
            } else {
                (fa, tokens, fv, tokens)
            };
            let grouped = if cfg.avg {
                let mut block = |m: &str, feats: Var, toks: Var, rows: usize| {
                    let noise = match (cfg.assignment, noise_rng.as_deref_mut()) {
                        (AssignmentMode::HardGumbel, Some(rng)) => Some(gumbel_noise(rng, rows, c)),
                        _ => None,
                    };
                    let a = assignment_graph(
                        g,
                        feats,
                        toks,
                        p.var(&grouping_name(m, "w_q")),
                        p.var(&grouping_name(m, "w_k")),
                        cfg.assignment,
                        noise.as_ref(),
                    );
                    let emb = group_graph(g, feats, a.pooling, toks, p.var(&grouping_name(m, "w_v")), p.var(&grouping_name(m, "w_o")));
                    let prob = presence_graph(g, emb, p.var(&presence_name(m, "w")), p.var(&presence_name(m, "b")));
                    (emb, prob)
                };
                let (ga, pa) = block("audio", ha, ta, 1);
                let (gv, pv) = block("visual", hv, tv, npos);
                Some(GroupedVars { audio: ga, visual: gv, p_audio: pa, p_visual: pv })
            } else {
                None
            };
            samples.push(SampleVars { raw_visual: fv, audio: ha, visual: hv, grouped });
        }
        Ok(Forward { samples, grid })
    }

    /// Localization loss plus, where enabled, the grouping loss (token
    /// cross-entropy and per-scene presence BCE averaged over the batch).
    /// `labels` holds one multi-hot vector per scene.
    pub fn loss(&self, g: &mut Graph, p: &Bound, fwd: &Forward, labels: &[Vec<u8>]) -> LossVars {
        assert_eq!(labels.len(), fwd.samples.len(), "one label vector per scene");
        let tau = self.config.temperature;
        let npos = fwd.grid.0 * fwd.grid.1;
        let loc = if self.config.class_aware() {
            // Slot n holds each scene's n-th present category, ascending.
            let present: Vec<Vec<usize>> = labels
                .iter()
                .map(|l| (0..l.len()).filter(|&k| l[k] != 0).collect())
                .collect();
            let max_n = present.iter().map(Vec::len).max().unwrap_or(0);
            let mut slots = Vec::with_capacity(max_n);
            for n in 0..max_n {
                let mut audio_rows = Vec::new();
                let mut bags = Vec::new();
                for (s, cats) in fwd.samples.iter().zip(&present) {
                    let (Some(gr), Some(&cat)) = (s.grouped, cats.get(n)) else { continue };
                    audio_rows.push(g.slice_rows(gr.audio, cat, 1));
                    let gv = g.slice_rows(gr.visual, cat, 1);
                    bags.push(g.mul_row(s.raw_visual, gv));
                }
                let count = audio_rows.len();
                let audio = g.concat_rows(&audio_rows);
                let visual = g.concat_rows(&bags);
                slots.push(SlotBatch { audio, visual, count });
            }
            localization_graph(g, &slots, npos, tau)
        } else {
            let audio: Vec<Var> = fwd.samples.iter().map(|s| s.audio).collect();
            let visual: Vec<Var> = fwd.samples.iter().map(|s| s.visual).collect();
            let a = g.concat_rows(&audio);
            let v = g.concat_rows(&visual);
            micl_graph(g, a, v, npos, tau)
        };
        let mut terms = Vec::new();
        if self.config.avct {
            let (_, ce) = token_ce_graph(g, p.var(TOKENS), p.var(CLASSIFIER_W), p.var(CLASSIFIER_B));
            terms.push(ce);
        }
        if self.config.avg {
            let mut bces = Vec::new();
            for (s, y) in fwd.samples.iter().zip(labels) {
                let gr = s.grouped.expect("grouping enabled");
                bces.push(bce_graph(g, gr.p_audio, y));
                bces.push(bce_graph(g, gr.p_visual, y));
            }
            let stacked = g.concat_rows(&bces);
            let sum = g.sum(stacked);
            terms.push(g.scale(sum, 1.0 / labels.len() as f64));
        }
        let group = if terms.is_empty() {
            None
        } else {
            let stacked = g.concat_rows(&terms);
            Some(g.sum(stacked))
        };
        let total = match group {
            Some(gl) => g.add(loc, gl),
            None => loc,
        };
        LossVars { total, loc, group }
    }

    /// Deterministic inference (hard assignment without noise).
    pub fn infer(&self, batch: &Batch) -> Result<Vec<SampleOutput>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &p, batch, None)?;
        let col = |g: &Graph, v: Var| g.value(v).column(0).to_vec();
        Ok(fwd
            .samples
            .iter()
            .map(|s| SampleOutput {
                grid: fwd.grid,
                raw_visual: g.value(s.raw_visual).clone(),
                audio: g.value(s.audio).clone(),
                visual: g.value(s.visual).clone(),
                grouped: s.grouped.map(|gr| GroupedEmbeddings {
                    audio: g.value(gr.audio).clone(),
                    visual: g.value(gr.visual).clone(),
                }),
                presence: s.grouped.map(|gr| SourcePresence { p_audio: col(&g, gr.p_audio), p_visual: col(&g, gr.p_visual) }),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_categories, make_sample};

    fn tiny(avct: bool, avg: bool) -> RunConfig {
        RunConfig { dim: 8, depth: 1, avct, avg, ..RunConfig::desk() }
    }

    fn duets(n: usize) -> Vec<SceneSample> {
        (0..n as u64).map(|s| make_sample(&default_categories(), 100 + s, 2).unwrap()).collect()
    }

    #[test]
    fn every_ablation_builds_a_finite_loss() {
        let batch = Batch::from_samples(&duets(3), 4).unwrap();
        for (avct, avg) in [(false, false), (true, false), (false, true), (true, true)] {
            let model = Model::new(tiny(avct, avg)).unwrap();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let fwd = model.forward(&mut g, &p, &batch, None).unwrap();
            assert_eq!(fwd.grid, (7, 14));
            let loss = model.loss(&mut g, &p, &fwd, &batch.labels);
            assert!(g.scalar(loss.total).is_finite());
            assert_eq!(loss.group.is_some(), avct || avg);
            let grads = g.backward(loss.total);
            let tok = grads.get(p.var(TOKENS));
            assert_eq!(tok.is_some(), avct || avg, "token gradient for ({avct}, {avg})");
        }
    }

    #[test]
    fn maps_are_shared_without_grouping() {
        let batch = Batch::from_samples(&duets(2), 4).unwrap();
        let out = Model::new(tiny(true, false)).unwrap().infer(&batch).unwrap();
        assert_eq!(out[0].feature_map(0).unwrap(), out[0].feature_map(3).unwrap());
        let out = Model::new(tiny(true, true)).unwrap().infer(&batch).unwrap();
        assert_eq!(out[0].feature_map(0).unwrap().dim(), (7, 14));
        assert_ne!(out[0].feature_map(0).unwrap(), out[0].feature_map(3).unwrap());
        assert_eq!(out[0].presence.as_ref().unwrap().p_audio.len(), 4);
    }

    #[test]
    fn from_params_checks_shapes() {
        let model = Model::new(tiny(true, true)).unwrap();
        let same = Model::from_params(model.config.clone(), model.params.clone()).unwrap();
        assert_eq!(same.params, model.params);
        let mut bad = model.params.clone();
        bad.insert(TOKENS, Mat::zeros((3, 8)));
        assert!(Model::from_params(model.config.clone(), bad).is_err());
        let other = RunConfig { dim: 16, ..model.config.clone() };
        assert!(Model::from_params(other, model.params.clone()).is_err());
    }

    #[test]
    fn batch_rejects_mixed_geometry() {
        let cats = default_categories();
        let solo = make_sample(&cats, 1, 1).unwrap();
        let duet = make_sample(&cats, 2, 2).unwrap();
        assert!(Batch::from_samples(&[solo.clone(), duet], 4).is_err());
        let out_of_range = vec![vec![7]];
        assert!(Batch::from_parts(&[solo.mixture], &[solo.image], &out_of_range, 4).is_err());
        assert!(Batch::from_parts(&[], &[], &[], 4).is_err());
    }
}
