//! Audio-visual grouping: soft (or straight-through Gumbel hard) assignment
//! of features to class tokens, normalized aggregation into per-category
//! embeddings, presence heads and ground-truth source selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Mat, Var};
use crate::error::{invalid, Result};

pub const EMPTY_GROUP_GUARD: f64 = 1.0;
pub const GUMBEL_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentMode {
    #[default]
    Soft,
    HardGumbel,
}

/// Projections for one modality. Features are row vectors, so `W·x` is
/// computed as `x·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl GroupingWeights {
    pub fn identity(dim: usize) -> Self {
        Self { w_q: Mat::eye(dim), w_k: Mat::eye(dim), w_v: Mat::eye(dim), w_o: Mat::eye(dim) }
    }

    fn check(&self, dim: usize) -> Result<()> {
        for (name, w) in [("W_q", &self.w_q), ("W_k", &self.w_k), ("W_v", &self.w_v), ("W_o", &self.w_o)] {
            if w.dim() != (dim, dim) {
                return invalid(format!("{name} is {:?}, expected {dim}×{dim}", w.dim()));
            }
        }
        Ok(())
    }
}

/// `M′×C` feature-to-category assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub values: Mat,
    pub mode: AssignmentMode,
}

/// Per-category audio and visual embeddings, both `C×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedEmbeddings {
    pub audio: Mat,
    pub visual: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcePresence {
    pub p_audio: Vec<f64>,
    pub p_visual: Vec<f64>,
}

/// Standard Gumbel noise `−ln(−ln u)`.
pub fn gumbel_noise<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    })
}

fn one_hot_argmax(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out[[r, best]] = 1.0;
    }
    out
}

/// Assignment of `M′` features to `C` categories together with the
/// `C×M′` pooling weights `A[m,i] / Σ_m A[m,i]`.
#[derive(Debug, Clone, Copy)]
pub struct AssignmentVars {
    pub values: Var,
    pub pooling: Var,
}

/// Logits `(features·W_q)·(tokens·W_k)ᵀ`, normalized over the category axis.
/// In hard mode the forward value is the one-hot argmax of
/// `(logits + noise)/temperature` while gradients flow through its softmax.
pub fn assignment_graph(
    g: &mut Graph,
    features: Var,
    tokens: Var,
    w_q: Var,
    w_k: Var,
    mode: AssignmentMode,
    noise: Option<&Mat>,
) -> AssignmentVars {
    let q = g.matmul(features, w_q);
    let k = g.matmul(tokens, w_k);
    let logits = g.matmul_nt(q, k);
    match mode {
        AssignmentMode::Soft => {
            // Normalizing columns of the softmax directly divides by masses
            // that can underflow; a column softmax of log A is the same
            // quantity computed stably, and exactly 1 for a single feature.
            let log_a = g.log_softmax_rows(logits);
            let values = g.softmax_rows(logits);
            let log_t = g.transpose(log_a);
            let pooling = g.softmax_rows(log_t);
            AssignmentVars { values, pooling }
        }
        AssignmentMode::HardGumbel => {
            let perturbed = match noise {
                Some(n) => {
                    let n = g.constant(n.clone());
                    g.add(logits, n)
                }
                None => logits,
            };
            let scaled = g.scale(perturbed, 1.0 / GUMBEL_TEMPERATURE);
            let soft = g.softmax_rows(scaled);
            let hard = one_hot_argmax(g.value(scaled));
            let values = g.straight_through(soft, hard);
            let pooling = pooling_from_values(g, values);
            AssignmentVars { values, pooling }
        }
    }
}

/// `Aᵀ` with each row divided by its mass. Categories that received no
/// mass divide by [`EMPTY_GROUP_GUARD`] instead, pooling to zero.
pub fn pooling_from_values(g: &mut Graph, assignment: Var) -> Var {
    let mass = g.col_sums_t(assignment);
    let guard = g.value(mass).mapv(|m| if m > 0.0 { 0.0 } else { EMPTY_GROUP_GUARD });
    let guard = g.constant(guard);
    let denom = g.add(mass, guard);
    let t = g.transpose(assignment);
    g.div_col(t, denom)
}

/// `g_i = ĉ_i + W_o·Σ_m P[i,m]·W_v·f_m` for pooling weights `P` (`C×M′`).
pub fn group_graph(g: &mut Graph, features: Var, pooling: Var, tokens: Var, w_v: Var, w_o: Var) -> Var {
    let values = g.matmul(features, w_v);
    let pooled = g.matmul(pooling, values);
    let projected = g.matmul(pooled, w_o);
    g.add(tokens, projected)
}

/// `sigmoid(g_i·w + b)` as a `C×1` column.
pub fn presence_graph(g: &mut Graph, grouped: Var, w: Var, b: Var) -> Var {
    let logits = g.matmul(grouped, w);
    let logits = g.add_row(logits, b);
    g.sigmoid(logits)
}

fn check_rows(features: &Mat, tokens: &Mat) -> Result<usize> {
    let d = tokens.ncols();
    if features.ncols() != d {
        return invalid(format!("features have D={}, tokens D={d}", features.ncols()));
    }
    if features.nrows() == 0 || tokens.nrows() == 0 {
        return invalid("empty features or tokens");
    }
    Ok(d)
}

pub fn compute_assignment(
    features: &Mat,
    tokens: &Mat,
    weights: &GroupingWeights,
    mode: AssignmentMode,
    noise: Option<&Mat>,
) -> Result<AssignmentMatrix> {
    let d = check_rows(features, tokens)?;
    weights.check(d)?;
    if let Some(n) = noise {
        if n.dim() != (features.nrows(), tokens.nrows()) {
            return invalid("noise shape must be M′×C");
        }
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let t = g.constant(tokens.clone());
    let q = g.constant(weights.w_q.clone());
    let k = g.constant(weights.w_k.clone());
    let a = assignment_graph(&mut g, f, t, q, k, mode, noise);
    Ok(AssignmentMatrix { values: g.value(a.values).clone(), mode })
}

pub fn group_features(
    features: &Mat,
    assignment: &AssignmentMatrix,
    tokens: &Mat,
    weights: &GroupingWeights,
) -> Result<Mat> {
    let d = check_rows(features, tokens)?;
    weights.check(d)?;
    if assignment.values.dim() != (features.nrows(), tokens.nrows()) {
        return invalid(format!(
            "assignment is {:?}, expected {}×{}",
            assignment.values.dim(),
            features.nrows(),
            tokens.nrows()
        ));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let a = g.constant(assignment.values.clone());
    let t = g.constant(tokens.clone());
    let v = g.constant(weights.w_v.clone());
    let o = g.constant(weights.w_o.clone());
    let pooling = pooling_from_values(&mut g, a);
    let out = group_graph(&mut g, f, pooling, t, v, o);
    Ok(g.value(out).clone())
}

/// Assignment and grouping in one pass, pooling through the stable soft
/// path. Returns the assignment and the `C×D` embeddings.
pub fn assign_and_group(
    features: &Mat,
    tokens: &Mat,
    weights: &GroupingWeights,
    mode: AssignmentMode,
    noise: Option<&Mat>,
) -> Result<(AssignmentMatrix, Mat)> {
    let d = check_rows(features, tokens)?;
    weights.check(d)?;
    if let Some(n) = noise {
        if n.dim() != (features.nrows(), tokens.nrows()) {
            return invalid("noise shape must be M′×C");
        }
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let t = g.constant(tokens.clone());
    let [q, k, v, o] = [&weights.w_q, &weights.w_k, &weights.w_v, &weights.w_o].map(|w| g.constant(w.clone()));
    let a = assignment_graph(&mut g, f, t, q, k, mode, noise);
    let out = group_graph(&mut g, f, a.pooling, t, v, o);
    Ok((AssignmentMatrix { values: g.value(a.values).clone(), mode }, g.value(out).clone()))
}

/// `p_i = sigmoid(g_i·w + b)` for a `D×1` head.
pub fn class_probability(grouped: &Mat, w: &Mat, b: f64) -> Result<Vec<f64>> {
    if w.dim() != (grouped.ncols(), 1) {
        return invalid(format!("head is {:?}, expected {}×1", w.dim(), grouped.ncols()));
    }
    Ok(grouped.dot(w).iter().map(|&z| sigmoid(z + b)).collect())
}

/// Rows of the grouped embeddings at the categories present in `labels`,
/// in ascending category order.
pub fn select_sources(grouped: &GroupedEmbeddings, labels: &[u8]) -> Result<(Mat, Mat)> {
    let idx = selected_categories(labels)?;
    if labels.len() != grouped.audio.nrows() || labels.len() != grouped.visual.nrows() {
        return invalid("label length does not match category count");
    }
    Ok((
        grouped.audio.select(ndarray::Axis(0), &idx),
        grouped.visual.select(ndarray::Axis(0), &idx),
    ))
}

pub fn selected_categories(labels: &[u8]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y != 0).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return invalid("label vector has no active category");
    }
    Ok(idx)
}

/// Categories whose presence probability in both modalities averages at
/// least 0.5. Falls back to the single most likely category.
pub fn predicted_categories(presence: &SourcePresence) -> Vec<usize> {
    let score: Vec<f64> = presence
        .p_audio
        .iter()
        .zip(&presence.p_visual)
        .map(|(a, v)| 0.5 * (a + v))
        .collect();
    let mut idx: Vec<usize> = (0..score.len()).filter(|&i| score[i] >= 0.5).collect();
    if idx.is_empty() {
        let best = (0..score.len()).max_by(|&a, &b| score[a].total_cmp(&score[b])).unwrap_or(0);
        idx.push(best);
    }
    idx
}
