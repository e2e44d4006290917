//! Learnable audio-visual class tokens, the self-attention stack that
//! aggregates raw features with them, and the token classifier.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Mat, Var};
use crate::error::{invalid, Result};
use crate::params::{normal_mat, Bound, ParamStore};

pub const TOKEN_INIT_STD: f64 = 0.02;
pub const CE_LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_DEPTH: usize = 3;

/// `C×D` learnable tokens, one per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTokens {
    pub tokens: Array2<f64>,
}

impl ClassTokens {
    pub fn init<R: Rng>(rng: &mut R, categories: usize, dim: usize) -> Self {
        Self { tokens: normal_mat(rng, categories, dim, TOKEN_INIT_STD) }
    }

    pub fn num_categories(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Features and tokens after attention, split back apart.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendedFeatures {
    pub features: Array2<f64>,
    pub tokens: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Each layer is the bare attention operator.
    AttentionOnly,
    /// Attention + residual, then a two-layer feed-forward + residual.
    #[default]
    Full,
}

/// One pass of `softmax(X·Xᵀ/√D)·X` without projections. Returns the output
/// and the attention weights.
pub fn attention_operator(x: &Mat) -> (Mat, Mat) {
    let d = x.ncols() as f64;
    let weights = softmax_rows(&(x.dot(&x.t()) / d.sqrt()));
    (weights.dot(x), weights)
}

/// Self-attention stack φ for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub prefix: String,
    pub dim: usize,
    pub depth: usize,
    pub kind: BlockKind,
}

impl AttentionStack {
    pub fn new(prefix: &str, dim: usize, depth: usize, kind: BlockKind) -> Self {
        Self { prefix: prefix.to_string(), dim, depth, kind }
    }

    fn name(&self, layer: usize, what: &str) -> String {
        format!("{}.layer{layer}.{what}", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.kind == BlockKind::AttentionOnly {
            return;
        }
        let (d, hidden) = (self.dim, 2 * self.dim);
        for l in 0..self.depth {
            store.insert(self.name(l, "ff1.w"), normal_mat(rng, d, hidden, (2.0 / d as f64).sqrt()));
            store.insert(self.name(l, "ff1.b"), Mat::zeros((1, hidden)));
            store.insert(self.name(l, "ff2.w"), normal_mat(rng, hidden, d, 0.02));
            store.insert(self.name(l, "ff2.b"), Mat::zeros((1, d)));
        }
    }

    fn attention(&self, g: &mut Graph, x: Var) -> Var {
        let logits = g.matmul_nt(x, x);
        let scaled = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax_rows(scaled);
        g.matmul(weights, x)
    }

    /// Runs the stack over an `M×D` sequence.
    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Var {
        for l in 0..self.depth {
            let a = self.attention(g, x);
            match self.kind {
                BlockKind::AttentionOnly => x = a,
                BlockKind::Full => {
                    let h = g.add(x, a);
                    let f = g.matmul(h, p.var(&self.name(l, "ff1.w")));
                    let f = g.add_row(f, p.var(&self.name(l, "ff1.b")));
                    let f = g.relu(f);
                    let f = g.matmul(f, p.var(&self.name(l, "ff2.w")));
                    let f = g.add_row(f, p.var(&self.name(l, "ff2.b")));
                    x = g.add(h, f);
                }
            }
        }
        x
    }
}

/// Concatenates `[features; tokens]`, runs the stack and splits the result.
pub fn attend(
    features: &Mat,
    tokens: &ClassTokens,
    stack: &AttentionStack,
    store: &ParamStore,
) -> Result<AttendedFeatures> {
    if stack.depth == 0 {
        return invalid("attention depth must be at least 1");
    }
    let d = stack.dim;
    if features.ncols() != d || tokens.tokens.ncols() != d {
        return invalid(format!(
            "dimension mismatch: features {}, tokens {}, stack {d}",
            features.ncols(),
            tokens.tokens.ncols()
        ));
    }
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.constant(features.clone());
    let t = g.constant(tokens.tokens.clone());
    let x = g.concat_rows(&[f, t]);
    let y = stack.forward(&mut g, &p, x);
    let out = g.value(y);
    let split = features.nrows();
    Ok(AttendedFeatures {
        features: out.slice(s![..split, ..]).to_owned(),
        tokens: out.slice(s![split.., ..]).to_owned(),
    })
}

/// Affine classifier `D → C` stored as `w: D×C`, `b: 1×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub w: Mat,
    pub b: Mat,
}

/// Row `i` holds `e_i`; targets are the identity rows `h_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenClassOutput {
    pub probabilities: Mat,
}

impl TokenClassOutput {
    pub fn targets(&self) -> Mat {
        Mat::eye(self.probabilities.nrows())
    }
}

pub fn token_class_logits(tokens: &ClassTokens, head: &ClassifierWeights) -> Result<TokenClassOutput> {
    let (c, d) = tokens.tokens.dim();
    if head.w.dim() != (d, c) || head.b.dim() != (1, c) {
        return invalid(format!(
            "classifier shape {:?}/{:?} does not map D={d} to C={c}",
            head.w.dim(),
            head.b.dim()
        ));
    }
    let logits = tokens.tokens.dot(&head.w) + &head.b;
    Ok(TokenClassOutput { probabilities: softmax_rows(&logits) })
}

/// `−Σᵢ log max(e_i[i], floor)`.
pub fn token_ce_loss(out: &TokenClassOutput) -> f64 {
    (0..out.probabilities.nrows())
        .map(|i| -out.probabilities[[i, i]].max(CE_LOG_FLOOR).ln())
        .sum()
}

/// Graph form: returns `(probabilities, loss)`.
pub fn token_ce_graph(g: &mut Graph, tokens: Var, w: Var, b: Var) -> (Var, Var) {
    let logits = g.matmul(tokens, w);
    let logits = g.add_row(logits, b);
    let probs = g.softmax_rows(logits);
    let diag = g.diag(probs);
    let logs = g.log_clamp(diag, CE_LOG_FLOOR);
    let total = g.sum(logs);
    (probs, g.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_give_uniform_weights() {
        let v = Mat::from_shape_vec((2, 3), vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
        let (out, w) = attention_operator(&v);
        assert!(w.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert_abs_diff_eq!(out, v, epsilon = 1e-15);
    }

    #[test]
    fn hand_softmax_single_dimension() {
        let x = Mat::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap();
        let (out, w) = attention_operator(&x);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(w[[0, 0]], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(w[[0, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(w[[0, 1]], 0.2689, epsilon = 1e-4);
        assert_abs_diff_eq!(out[[0, 0]], 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn attention_only_stack_matches_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = normal_mat(&mut rng, 3, 4, 1.0);
        let tokens = ClassTokens { tokens: normal_mat(&mut rng, 2, 4, 1.0) };
        let stack = AttentionStack::new("a", 4, 1, BlockKind::AttentionOnly);
        let out = attend(&feats, &tokens, &stack, &ParamStore::new()).unwrap();
        let x = ndarray::concatenate(ndarray::Axis(0), &[feats.view(), tokens.tokens.view()]).unwrap();
        let (expected, _) = attention_operator(&x);
        assert_abs_diff_eq!(out.features, expected.slice(s![..3, ..]).to_owned(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.tokens, expected.slice(s![3.., ..]).to_owned(), epsilon = 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = normal_mat(&mut rng, 6, 5, 2.0);
            let (_, w) = attention_operator(&x);
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn token_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        let stack = AttentionStack::new("v", d, DEFAULT_DEPTH, BlockKind::Full);
        let mut store = ParamStore::new();
        stack.init(&mut store, &mut rng);
        let feats = normal_mat(&mut rng, 5, d, 1.0);
        let tokens = ClassTokens { tokens: normal_mat(&mut rng, 4, d, 1.0) };
        let base = attend(&feats, &tokens, &stack, &store).unwrap();
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let permuted = ClassTokens { tokens: tokens.tokens.select(ndarray::Axis(0), &perm) };
            let out = attend(&feats, &permuted, &stack, &store).unwrap();
            assert_abs_diff_eq!(out.tokens, base.tokens.select(ndarray::Axis(0), &perm), epsilon = 1e-10);
            assert_abs_diff_eq!(out.features, base.features, epsilon = 1e-10);
        }
    }

    #[test]
    fn attend_rejects_bad_shapes() {
        let stack = AttentionStack::new("a", 4, 1, BlockKind::AttentionOnly);
        let tokens = ClassTokens { tokens: Mat::zeros((2, 4)) };
        assert!(attend(&Mat::zeros((3, 5)), &tokens, &stack, &ParamStore::new()).is_err());
        let zero_depth = AttentionStack::new("a", 4, 0, BlockKind::AttentionOnly);
        assert!(attend(&Mat::zeros((3, 4)), &tokens, &zero_depth, &ParamStore::new()).is_err());
    }

    #[test]
    fn classifier_examples() {
        let c = 4;
        let tokens = ClassTokens { tokens: Mat::eye(c) * 10.0 };
        let head = ClassifierWeights { w: Mat::eye(c), b: Mat::zeros((1, c)) };
        let out = token_class_logits(&tokens, &head).unwrap();
        for i in 0..c {
            let row = out.probabilities.row(i);
            let arg = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, i);
        }
        let zero = ClassifierWeights { w: Mat::zeros((c, c)), b: Mat::zeros((1, c)) };
        let uni = token_class_logits(&tokens, &zero).unwrap();
        assert!(uni.probabilities.iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let two = ClassTokens { tokens: Mat::from_shape_vec((2, 1), vec![2.0, 0.0]).unwrap() };
        let head = ClassifierWeights {
            w: Mat::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(),
            b: Mat::zeros((1, 2)),
        };
        let out = token_class_logits(&two, &head).unwrap();
        assert_abs_diff_eq!(out.probabilities[[0, 0]], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(out.probabilities[[0, 1]], 0.1192, epsilon = 1e-4);
        assert_eq!(out.targets(), Mat::eye(2));
        let bad = ClassifierWeights { w: Mat::zeros((3, 2)), b: Mat::zeros((1, 2)) };
        assert!(token_class_logits(&two, &bad).is_err());
    }

    #[test]
    fn ce_examples() {
        let perfect = TokenClassOutput { probabilities: Mat::eye(3) };
        assert_eq!(token_ce_loss(&perfect), 0.0);
        let uniform = TokenClassOutput { probabilities: Mat::from_elem((2, 2), 0.5) };
        assert_abs_diff_eq!(token_ce_loss(&uniform), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(token_ce_loss(&uniform), 1.3863, epsilon = 1e-4);
        let better = TokenClassOutput {
            probabilities: Mat::from_shape_vec((2, 2), vec![0.7, 0.3, 0.5, 0.5]).unwrap(),
        };
        assert!(token_ce_loss(&better) < token_ce_loss(&uniform));
        let zero = TokenClassOutput { probabilities: Mat::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap() };
        assert_abs_diff_eq!(token_ce_loss(&zero), -CE_LOG_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn graph_ce_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = ClassTokens { tokens: normal_mat(&mut rng, 3, 5, 1.0) };
        let head = ClassifierWeights { w: normal_mat(&mut rng, 5, 3, 1.0), b: normal_mat(&mut rng, 1, 3, 1.0) };
        let plain = token_ce_loss(&token_class_logits(&tokens, &head).unwrap());
        let mut g = Graph::new();
        let t = g.constant(tokens.tokens.clone());
        let w = g.constant(head.w.clone());
        let b = g.constant(head.b.clone());
        let (_, loss) = token_ce_graph(&mut g, t, w, b);
        assert_abs_diff_eq!(g.scalar(loss), plain, epsilon = 1e-12);
    }
}
