//! Training objectives: the multiple-instance contrastive loss on max-pooled
//! cosine similarity, the grouping loss, the class-aware localization loss
//! and their sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::avct::{TokenClassOutput, CE_LOG_FLOOR};
use crate::error::{invalid, Result};
use crate::grouping::SourcePresence;

pub const NORM_EPS: f64 = 1e-12;
pub const PROB_CLAMP: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Class-aware features of one source: `g_n^a` and `{f_p^v ⊙ g_n^v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAwarePair {
    pub audio: Mat,
    pub visual: Mat,
}

impl ClassAwarePair {
    pub fn new(g_audio: &Mat, raw_visual: &Mat, g_visual: &Mat) -> Self {
        Self { audio: g_audio.clone(), visual: raw_visual * g_visual }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    dot / (na * nb)
}

/// Max over visual rows of the cosine with `audio` (`1×D`).
pub fn pairwise_sim(audio: &Mat, visual: &Mat) -> f64 {
    let a = audio.row(0).to_vec();
    visual
        .rows()
        .into_iter()
        .map(|r| cosine(&a, &r.to_vec()))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Contrastive loss over a batch. `audio` is `B×D`; `visual` stacks the `B`
/// bags of `bag` rows each.
pub fn micl_graph(g: &mut Graph, audio: Var, visual: Var, bag: usize, temperature: f64) -> Var {
    let a = g.normalize_rows(audio, NORM_EPS);
    let v = g.normalize_rows(visual, NORM_EPS);
    let cos = g.matmul_nt(a, v);
    let sim = g.group_max_cols(cos, bag);
    let logits = g.scale(sim, 1.0 / temperature);
    let log_probs = g.log_softmax_rows(logits);
    let diag = g.diag(log_probs);
    let mean = g.mean(diag);
    g.scale(mean, -1.0)
}

fn stack_bags(visual: &[Mat]) -> Result<(Mat, usize)> {
    let bag = visual.first().map(Mat::nrows).unwrap_or(0);
    if bag == 0 || visual.iter().any(|v| v.nrows() != bag) {
        return invalid("visual bags must be non-empty and equally sized");
    }
    let views: Vec<_> = visual.iter().map(Mat::view).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
    Ok((stacked, bag))
}

/// `audio` rows are the per-sample global features; `visual[b]` is the
/// `P×D` bag of sample `b`.
pub fn micl_loss(audio: &Mat, visual: &[Mat], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if audio.nrows() == 0 || audio.nrows() != visual.len() {
        return invalid(format!("{} audio rows for {} visual bags", audio.nrows(), visual.len()));
    }
    let (stacked, bag) = stack_bags(visual)?;
    if stacked.ncols() != audio.ncols() {
        return invalid("audio and visual feature sizes differ");
    }
    let mut g = Graph::new();
    let a = g.constant(audio.clone());
    let v = g.constant(stacked);
    let loss = micl_graph(&mut g, a, v, bag, cfg.temperature);
    Ok(g.scalar(loss))
}

/// Binary cross-entropy summed over categories, probabilities as a `C×1`
/// column.
pub fn bce_graph(g: &mut Graph, probs: Var, labels: &[u8]) -> Var {
    let y = Mat::from_shape_fn((labels.len(), 1), |(i, _)| labels[i] as f64);
    let pos = g.log_clamp(probs, PROB_CLAMP);
    let q = g.one_minus(probs);
    let neg = g.log_clamp(q, PROB_CLAMP);
    let yv = g.constant(y.clone());
    let ny = g.constant(y.mapv(|v| 1.0 - v));
    let a = g.mul(yv, pos);
    let b = g.mul(ny, neg);
    let both = g.add(a, b);
    let s = g.sum(both);
    g.scale(s, -1.0)
}

fn bce(y: u8, p: f64) -> f64 {
    if y != 0 {
        -p.max(PROB_CLAMP).ln()
    } else {
        -(1.0 - p).max(PROB_CLAMP).ln()
    }
}

/// Token cross-entropy plus audio and visual presence BCE.
pub fn group_loss(token_out: &TokenClassOutput, presence: &SourcePresence, labels: &[u8]) -> Result<f64> {
    let c = labels.len();
    if token_out.probabilities.dim() != (c, c) || presence.p_audio.len() != c || presence.p_visual.len() != c {
        return invalid("token, presence and label sizes disagree");
    }
    let mut total = 0.0;
    for i in 0..c {
        total += -token_out.probabilities[[i, i]].max(CE_LOG_FLOOR).ln();
        total += bce(labels[i], presence.p_audio[i]);
        total += bce(labels[i], presence.p_visual[i]);
    }
    Ok(total)
}

/// One source slot of the localization loss: the anchors' audio rows and
/// the stacked visual bags of the samples that own that slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotBatch {
    pub audio: Var,
    pub visual: Var,
    pub count: usize,
}

/// Mean over all `(b, n)` anchors; negatives for slot `n` are the other
/// samples' slot-`n` bags.
pub fn localization_graph(g: &mut Graph, slots: &[SlotBatch], bag: usize, temperature: f64) -> Var {
    let total: usize = slots.iter().map(|s| s.count).sum();
    let mut terms = Vec::with_capacity(slots.len());
    for s in slots {
        let l = micl_graph(g, s.audio, s.visual, bag, temperature);
        terms.push(g.scale(l, s.count as f64 / total as f64));
    }
    let stacked = g.concat_rows(&terms);
    g.sum(stacked)
}

/// `pairs[b][n]` is source `n` of sample `b`. Samples may own different
/// source counts; slot `n` then contrasts only the samples that have it.
pub fn localization_loss(pairs: &[Vec<ClassAwarePair>], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let max_n = pairs.iter().map(Vec::len).max().unwrap_or(0);
    if pairs.is_empty() || pairs.iter().any(Vec::is_empty) {
        return invalid("every sample needs at least one source");
    }
    let bag = pairs[0][0].visual.nrows();
    let mut g = Graph::new();
    let mut slots = Vec::with_capacity(max_n);
    for n in 0..max_n {
        let members: Vec<&ClassAwarePair> = pairs.iter().filter_map(|p| p.get(n)).collect();
        let audio_rows: Vec<_> = members.iter().map(|p| p.audio.view()).collect();
        let audio = ndarray::concatenate(ndarray::Axis(0), &audio_rows).map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
        let bags: Vec<Mat> = members.iter().map(|p| p.visual.clone()).collect();
        let (visual, this_bag) = stack_bags(&bags)?;
        if this_bag != bag || audio.nrows() != members.len() {
            return invalid("class-aware pairs have inconsistent shapes");
        }
        let count = members.len();
        let audio = g.constant(audio);
        let visual = g.constant(visual);
        slots.push(SlotBatch { audio, visual, count });
    }
    let loss = localization_graph(&mut g, &slots, bag, cfg.temperature);
    Ok(g.scalar(loss))
}

pub fn total_loss(loc: f64, group: f64) -> Result<f64> {
    if !loc.is_finite() || !group.is_finite() {
        return invalid("loss terms must be finite");
    }
    Ok(loc + group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_mat;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> Mat {
        Mat::from_shape_vec((r, c), v.to_vec()).unwrap()
    }

    /// Direct evaluation of the contrastive formula from a similarity table.
    fn oracle_from_sims(s: &[Vec<f64>], tau: f64) -> f64 {
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            let denom: f64 = s[i].iter().map(|x| (x / tau).exp()).sum();
            total += -((s[i][i] / tau).exp() / denom).ln();
        }
        total / b as f64
    }

    #[test]
    fn similarity_examples() {
        let a = m(1, 2, &[1.0, 1.0]);
        assert_abs_diff_eq!(pairwise_sim(&a, &m(2, 2, &[2.0, 2.0, 0.0, 1.0])), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pairwise_sim(&a, &m(2, 2, &[1.0, -1.0, -2.0, 2.0])), 0.0, epsilon = 1e-12);
        let s = pairwise_sim(&a, &m(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        assert_abs_diff_eq!(s, 0.7071, epsilon = 1e-4);
        assert_abs_diff_eq!(pairwise_sim(&Mat::zeros((1, 2)), &a), 0.0);
    }

    #[test]
    fn micl_examples() {
        let cfg = LossConfig { temperature: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = micl_loss(&normal_mat(&mut rng, 1, 4, 1.0), &[normal_mat(&mut rng, 3, 4, 1.0)], &cfg).unwrap();
        assert_eq!(single, 0.0);

        // s11 = s22 = 1, s12 = s21 = 0
        let audio = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let visual = vec![m(2, 2, &[1.0, 0.0, 0.0, -1.0]), m(2, 2, &[0.0, 1.0, -1.0, 0.0])];
        let l = micl_loss(&audio, &visual, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(l, -(e / (e + 1.0)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.3133, epsilon = 1e-4);

        let mut prev = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.07] {
            let l = micl_loss(&audio, &visual, &LossConfig { temperature: tau }).unwrap();
            assert_abs_diff_eq!(l, oracle_from_sims(&[vec![1.0, 0.0], vec![0.0, 1.0]], tau), epsilon = 1e-12);
            assert!(l < prev);
            prev = l;
        }
        assert!(micl_loss(&audio, &visual, &LossConfig { temperature: 0.0 }).is_err());
    }

    #[test]
    fn micl_matches_brute_force_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b = rng.gen_range(1..5);
            let audio = normal_mat(&mut rng, b, 5, 1.0);
            let visual: Vec<Mat> = (0..b).map(|_| normal_mat(&mut rng, 4, 5, 1.0)).collect();
            let sims: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| pairwise_sim(&audio.slice(ndarray::s![i..i + 1, ..]).to_owned(), &visual[j])).collect())
                .collect();
            let tau = rng.gen_range(0.05..1.0);
            let l = micl_loss(&audio, &visual, &LossConfig { temperature: tau }).unwrap();
            assert_abs_diff_eq!(l, oracle_from_sims(&sims, tau), epsilon = 1e-9);
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn losses_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        let audio = normal_mat(&mut rng, 3, 5, 1.0);
        let visual: Vec<Mat> = (0..3).map(|_| normal_mat(&mut rng, 4, 5, 1.0)).collect();
        let base = micl_loss(&audio, &visual, &cfg).unwrap();
        let mut scaled_audio = audio.clone();
        scaled_audio.row_mut(1).mapv_inplace(|x| x * 7.5);
        let mut scaled_visual = visual.clone();
        scaled_visual[2].row_mut(3).mapv_inplace(|x| x * 0.01);
        assert_abs_diff_eq!(micl_loss(&scaled_audio, &scaled_visual, &cfg).unwrap(), base, epsilon = 1e-8);
    }

    #[test]
    fn group_loss_examples() {
        let perfect = TokenClassOutput { probabilities: Mat::eye(2) };
        let p = SourcePresence { p_audio: vec![1.0, 0.0], p_visual: vec![1.0, 0.0] };
        assert_abs_diff_eq!(group_loss(&perfect, &p, &[1, 0]).unwrap(), 0.0, epsilon = 1e-10);

        let one = TokenClassOutput { probabilities: Mat::eye(1) };
        let half = SourcePresence { p_audio: vec![0.5], p_visual: vec![0.5] };
        let l = group_loss(&one, &half, &[1]).unwrap();
        assert_abs_diff_eq!(l, 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.3863, epsilon = 1e-4);

        let tok = TokenClassOutput { probabilities: m(2, 2, &[0.6, 0.4, 0.3, 0.7]) };
        let pres = SourcePresence { p_audio: vec![0.8, 0.3], p_visual: vec![0.6, 0.9] };
        let labels = [1, 0];
        let ce = crate::avct::token_ce_loss(&tok);
        let ba: f64 = (0..2).map(|i| bce(labels[i], pres.p_audio[i])).sum();
        let bv: f64 = (0..2).map(|i| bce(labels[i], pres.p_visual[i])).sum();
        assert!(ce >= 0.0 && ba >= 0.0 && bv >= 0.0);
        assert_abs_diff_eq!(group_loss(&tok, &pres, &labels).unwrap(), ce + ba + bv, epsilon = 1e-12);
        assert!(group_loss(&tok, &pres, &[1, 0, 0]).is_err());
    }

    #[test]
    fn bce_graph_matches_plain() {
        let mut g = Graph::new();
        let p = g.constant(m(3, 1, &[0.2, 0.9, 0.0]));
        let l = bce_graph(&mut g, p, &[1, 1, 0]);
        let expected = bce(1, 0.2) + bce(1, 0.9) + bce(0, 0.0);
        assert_abs_diff_eq!(g.scalar(l), expected, epsilon = 1e-12);
    }

    #[test]
    fn localization_examples() {
        let cfg = LossConfig { temperature: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pair = |rng: &mut ChaCha8Rng| ClassAwarePair {
            audio: normal_mat(rng, 1, 3, 1.0),
            visual: normal_mat(rng, 4, 3, 1.0),
        };
        let single = vec![vec![pair(&mut rng), pair(&mut rng), pair(&mut rng)]];
        assert_eq!(localization_loss(&single, &cfg).unwrap(), 0.0);

        let a = [m(1, 2, &[1.0, 0.0]), m(1, 2, &[0.0, 1.0])];
        let v = [m(2, 2, &[1.0, 0.0, 0.0, -1.0]), m(2, 2, &[0.0, 1.0, -1.0, 0.0])];
        let one_slot: Vec<Vec<ClassAwarePair>> =
            (0..2).map(|b| vec![ClassAwarePair { audio: a[b].clone(), visual: v[b].clone() }]).collect();
        let l1 = localization_loss(&one_slot, &cfg).unwrap();
        assert_abs_diff_eq!(l1, 0.3133, epsilon = 1e-4);
        let two_slots: Vec<Vec<ClassAwarePair>> = one_slot.iter().map(|p| vec![p[0].clone(), p[0].clone()]).collect();
        assert_abs_diff_eq!(localization_loss(&two_slots, &cfg).unwrap(), l1, epsilon = 1e-12);

        let audio = ndarray::concatenate(ndarray::Axis(0), &[a[0].view(), a[1].view()]).unwrap();
        assert_abs_diff_eq!(micl_loss(&audio, &v, &cfg).unwrap(), l1, epsilon = 1e-15);
    }

    #[test]
    fn ragged_slots_contrast_only_owners() {
        let cfg = LossConfig { temperature: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pair = || ClassAwarePair { audio: normal_mat(&mut rng, 1, 3, 1.0), visual: normal_mat(&mut rng, 2, 3, 1.0) };
        let p: Vec<Vec<ClassAwarePair>> = vec![vec![pair(), pair()], vec![pair()], vec![pair(), pair()]];
        let slot0 = localization_loss(&[vec![p[0][0].clone()], vec![p[1][0].clone()], vec![p[2][0].clone()]], &cfg).unwrap();
        let slot1 = localization_loss(&[vec![p[0][1].clone()], vec![p[2][1].clone()]], &cfg).unwrap();
        let ragged = localization_loss(&p, &cfg).unwrap();
        assert_abs_diff_eq!(ragged, (3.0 * slot0 + 2.0 * slot1) / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn class_aware_pair_is_elementwise_product() {
        let g_a = m(1, 2, &[1.0, 0.0]);
        let raw = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g_v = m(1, 2, &[0.5, -1.0]);
        let p = ClassAwarePair::new(&g_a, &raw, &g_v);
        assert_eq!(p.visual, m(2, 2, &[0.5, -2.0, 1.5, -4.0]));
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(total_loss(0.3133, 1.3863).unwrap(), 1.6996, epsilon = 1e-12);
        assert!(total_loss(0.5, 1.0).unwrap() < total_loss(0.6, 1.0).unwrap());
        assert!(total_loss(0.5, 1.0).unwrap() < total_loss(0.5, 1.1).unwrap());
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }
}
