//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Everything the model needs is expressed as 2-D matrices; spatial
//! feature maps are stored as `(batch, row, col)`-major rows by channel
//! columns.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    LogClamp(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ColSumsT(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SpaceToDepth(Var, SpaceToDepthGeom),
    GroupMeanRows(Var, usize),
    GroupMaxCols(Var, Vec<usize>),
    NormalizeRows(Var, f64),
    Sum(Var),
    Diag(Var),
    Transpose(Var),
    StraightThrough(Var),
}

/// Geometry of a batched 2×2 stride-2 space-to-depth rearrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceToDepthGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SpaceToDepthGeom {
    pub fn out_height(&self) -> usize {
        self.height / 2
    }

    pub fn out_width(&self) -> usize {
        self.width / 2
    }
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::DivCol(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::ConcatRows(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::LogClamp(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::ColSumsT(a)
            | Op::GatherRows(a, _)
            | Op::SpaceToDepth(a, _)
            | Op::GroupMeanRows(a, _)
            | Op::GroupMaxCols(a, _)
            | Op::NormalizeRows(a, _)
            | Op::Sum(a)
            | Op::Diag(a)
            | Op::Transpose(a)
            | Op::StraightThrough(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).t().dot(self.value(b));
        self.push(value, Op::MatMulTN(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` element-wise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    /// Divides row `i` of `a` by `col[i, 0]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) / self.value(col);
        self.push(value, Op::DivCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        self.push(value, Op::OneMinus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(value, Op::LogClamp(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Column sums of an `m×n` matrix, returned as an `n×1` column.
    pub fn col_sums_t(&mut self, a: Var) -> Var {
        let sums = self.value(a).sum_axis(Axis(0));
        let n = sums.len();
        let value = sums.into_shape_with_order((n, 1)).expect("column");
        self.push(value, Op::ColSumsT(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &rows)
    }

    /// 2×2 stride-2 space-to-depth. Odd trailing rows/columns are dropped.
    /// Output columns are ordered `(dy, dx, channel)`.
    pub fn space_to_depth(&mut self, a: Var, geom: SpaceToDepthGeom) -> Var {
        let x = self.value(a);
        assert_eq!(
            x.dim(),
            (geom.batch * geom.height * geom.width, geom.channels),
            "space_to_depth: geometry does not match input"
        );
        let (oh, ow, c) = (geom.out_height(), geom.out_width(), geom.channels);
        let mut out = Mat::zeros((geom.batch * oh * ow, 4 * c));
        for b in 0..geom.batch {
            for y in 0..oh {
                for xx in 0..ow {
                    let orow = (b * oh + y) * ow + xx;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let irow = (b * geom.height + 2 * y + dy) * geom.width + 2 * xx + dx;
                            let off = (dy * 2 + dx) * c;
                            out.slice_mut(s![orow, off..off + c])
                                .assign(&x.slice(s![irow, ..]));
                        }
                    }
                }
            }
        }
        self.push(out, Op::SpaceToDepth(a, geom))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.nrows() % group == 0, "group_mean_rows: bad group");
        let n = x.nrows() / group;
        let mut out = Mat::zeros((n, x.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let block = x.slice(s![i * group..(i + 1) * group, ..]);
            row.assign(&block.mean_axis(Axis(0)).expect("nonempty group"));
        }
        self.push(out, Op::GroupMeanRows(a, group))
    }

    /// Max over consecutive groups of `group` columns. First maximum wins ties.
    pub fn group_max_cols(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.ncols() % group == 0, "group_max_cols: bad group");
        let k = x.ncols() / group;
        let mut out = Mat::zeros((x.nrows(), k));
        let mut arg = Vec::with_capacity(x.nrows() * k);
        for r in 0..x.nrows() {
            for j in 0..k {
                let mut best = j * group;
                for c in j * group..(j + 1) * group {
                    if x[[r, c]] > x[[r, best]] {
                        best = c;
                    }
                }
                out[[r, j]] = x[[r, best]];
                arg.push(best);
            }
        }
        self.push(out, Op::GroupMaxCols(a, arg))
    }

    /// Row-wise `x / max(‖x‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row /= n;
        }
        self.push(value, Op::NormalizeRows(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), x.ncols(), "diag: matrix must be square");
        let n = x.nrows();
        let value = Mat::from_shape_fn((n, 1), |(i, _)| x[[i, i]]);
        self.push(value, Op::Diag(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Forward value is `hard`; the backward pass routes the gradient to
    /// `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Mat) -> Var {
        assert_eq!(self.value(soft).dim(), hard.dim(), "straight_through: shape");
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.dot(&val(b).t()));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], val(a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.dot(val(b)));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.t().dot(val(a)));
                }
            }
            Op::MatMulTN(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], val(b).dot(&g.t()));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], val(a).dot(g));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g * val(b));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g * val(a));
                }
            }
            Op::AddRow(a, r) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(r) {
                    accumulate(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g * val(r));
                }
                if wants(r) {
                    let gr = (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[r.0], gr);
                }
            }
            Op::DivCol(a, c) => {
                let cv = val(c);
                if wants(a) {
                    accumulate(&mut grads[a.0], g / cv);
                }
                if wants(c) {
                    let av = val(a);
                    let mut gc = Mat::zeros(cv.dim());
                    for i in 0..av.nrows() {
                        let dot = g.row(i).dot(&av.row(i));
                        gc[[i, 0]] = -dot / (cv[[i, 0]] * cv[[i, 0]]);
                    }
                    accumulate(&mut grads[c.0], gc);
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
            Op::OneMinus(a) => accumulate(&mut grads[a.0], -g),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(a)).for_each(|gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(y).for_each(|gv, &s| *gv *= s * (1.0 - s));
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogClamp(a, floor) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(a)).for_each(|gv, &x| {
                    *gv = if x > *floor { *gv / x } else { 0.0 };
                });
                accumulate(&mut grads[a.0], ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g * y;
                for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let s = grow.sum();
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * s);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let s = grow.sum();
                    grow.zip_mut_with(&yrow, |gv, &lv| *gv -= lv.exp() * s);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ColSumsT(a) => {
                let (m, n) = val(a).dim();
                let ga = Mat::from_shape_fn((m, n), |(_, j)| g[[j, 0]]);
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).nrows();
                    if wants(p) {
                        accumulate(&mut grads[p.0], g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut ga = Mat::zeros(val(a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(i);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SpaceToDepth(a, geom) => {
                let (oh, ow, c) = (geom.out_height(), geom.out_width(), geom.channels);
                let mut ga = Mat::zeros(val(a).dim());
                for b in 0..geom.batch {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let orow = (b * oh + yy) * ow + xx;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let irow =
                                        (b * geom.height + 2 * yy + dy) * geom.width + 2 * xx + dx;
                                    let off = (dy * 2 + dx) * c;
                                    ga.slice_mut(s![irow, ..])
                                        .assign(&g.slice(s![orow, off..off + c]));
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::GroupMeanRows(a, group) => {
                let x = val(a);
                let inv = 1.0 / *group as f64;
                let ga = Mat::from_shape_fn(x.dim(), |(r, c)| g[[r / group, c]] * inv);
                accumulate(&mut grads[a.0], ga);
            }
            Op::GroupMaxCols(a, arg) => {
                let mut ga = Mat::zeros(val(a).dim());
                let k = g.ncols();
                for r in 0..g.nrows() {
                    for j in 0..k {
                        ga[[r, arg[r * k + j]]] += g[[r, j]];
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::NormalizeRows(a, eps) => {
                let x = val(a);
                let mut ga = Mat::zeros(x.dim());
                for i in 0..x.nrows() {
                    let norm = x.row(i).dot(&x.row(i)).sqrt();
                    let gr = g.row(i);
                    if norm > *eps {
                        let yr = y.row(i);
                        let proj = gr.dot(&yr);
                        let mut dst = ga.row_mut(i);
                        dst.assign(&((&gr - &(&yr * proj)) / norm));
                    } else {
                        ga.row_mut(i).assign(&(&gr / *eps));
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let ga = Mat::from_elem(val(a).dim(), g[[0, 0]]);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Diag(a) => {
                let mut ga = Mat::zeros(val(a).dim());
                for i in 0..g.nrows() {
                    ga[[i, i]] = g[[i, 0]];
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::StraightThrough(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().as_standard_layout().into_owned()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(input.dim()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut gg = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == k {
                                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                                m[[r, c]] += delta;
                            }
                            gg.param(m)
                        })
                        .collect();
                    let o = build(&mut gg, &vs);
                    gg.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} idx {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let r = rand_mat(&mut rng, 1, 2);
        check(vec![a, b, r], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let m = g.mul_row(m, v[2]);
            let s = g.sigmoid(m);
            let t = g.softmax_rows(s);
            let l = g.log_softmax_rows(t);
            let d = g.mul(l, t);
            let tn = g.matmul_tn(v[0], v[0]);
            let nt = g.matmul(tn, v[1]);
            let tt = g.transpose(nt);
            let nt = g.matmul_nt(tt, tt);
            let sq = g.mul(nt, nt);
            let all = g.concat_rows(&[d, sq]);
            g.sum(all)
        });
    }

    #[test]
    fn normalization_and_pooling_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 6, 3);
        check(vec![a, b], |g, v| {
            let na = g.normalize_rows(v[0], 1e-12);
            let nb = g.normalize_rows(v[1], 1e-12);
            let s = g.matmul_nt(na, nb);
            let m = g.group_max_cols(s, 3);
            let sc = g.scale(m, 1.0 / 0.3);
            let ls = g.log_softmax_rows(sc);
            let d = g.diag(ls);
            g.mean(d)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 2 * 4 * 6, 2);
        let w = rand_mat(&mut rng, 8, 3);
        let col = Mat::from_shape_fn((3, 1), |_| rng.gen_range(0.5..1.5));
        check(vec![a, w, col], |g, v| {
            let geom = SpaceToDepthGeom { batch: 2, height: 4, width: 6, channels: 2 };
            let s2d = g.space_to_depth(v[0], geom);
            let h = g.matmul(s2d, v[1]);
            let h = g.relu(h);
            let pooled = g.group_mean_rows(h, 6);
            let both = g.concat_rows(&[pooled, h]);
            let picked = g.gather_rows(both, &[0, 3, 3, 7]);
            let cs = g.col_sums_t(picked);
            let dc = g.div_col(cs, v[2]);
            let om = g.one_minus(dc);
            let sq = g.mul(om, om);
            let lc = g.log_clamp(sq, 1e-12);
            g.sum(lc)
        });
    }

    #[test]
    fn straight_through_forwards_hard_and_passes_soft_gradient() {
        let mut g = Graph::new();
        let x = g.param(Mat::from_shape_vec((1, 2), vec![0.3, 0.7]).unwrap());
        let hard = Mat::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        let st = g.straight_through(x, hard.clone());
        assert_eq!(g.value(st), &hard);
        let w = g.constant(Mat::from_shape_vec((1, 2), vec![2.0, -1.0]).unwrap());
        let p = g.mul(st, w);
        let out = g.sum(p);
        let grads = g.backward(out);
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::ones((2, 2)));
        let p = g.param(Mat::ones((2, 2)));
        let m = g.mul(c, p);
        let out = g.sum(m);
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
