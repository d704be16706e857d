//! Tape-based reverse-mode differentiation over `Array2<f64>` values.
//!
//! Nodes are appended in construction order (already topologically
//! sorted), values are computed eagerly, and `backward` walks the tape in
//! reverse accumulating gradients. Leaves created with
//! `requires_grad = false` act as stop-gradient constants: nothing is
//! ever propagated into them, which is how teacher outputs and targets
//! are kept out of the optimization path.

use ndarray::{s, Array2, Axis};
use statrs::function::erf::erf;

pub type NodeId = usize;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LAYER_NORM_EPS: f64 = 1e-6;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() * INV_SQRT_2PI;
    cdf + x * pdf
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m x n] + [1 x n]`, the row vector broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// `[m x n] * [1 x n]`, elementwise per row.
    MulRowVec(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SoftmaxRows(NodeId),
    /// `ln(max(x, floor))`.
    LogClamped {
        x: NodeId,
        floor: f64,
    },
    /// Row-wise `x / max(||x||, eps)`.
    L2NormRows {
        x: NodeId,
        eps: f64,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    /// Assemble `[n_total x d]`: `rows[visible_idx[r]] = visible[r]`,
    /// `rows[i] = fill` for `i` in `fill_idx`.
    ScatterFill {
        visible: NodeId,
        fill: NodeId,
        visible_idx: Vec<usize>,
        fill_idx: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    /// Constant per-row scaling (no gradient into the factors).
    RowScale {
        x: NodeId,
        factors: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[[0, 0]]
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Stop-gradient leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a), self.needs(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_row_vec(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[x].value + &self.nodes[row].value;
        self.push(v, Op::AddRowVec(x, row), self.needs(x) || self.needs(row))
    }

    pub fn mul_row_vec(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[x].value * &self.nodes[row].value;
        self.push(v, Op::MulRowVec(x, row), self.needs(x) || self.needs(row))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(gelu_scalar);
        self.push(v, Op::Gelu(x), self.needs(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let mut v = Array2::zeros(xv.raw_dim());
        for (mut out, row) in v.outer_iter_mut().zip(xv.outer_iter()) {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, o) in out.iter_mut().enumerate() {
                *o = (row[j] - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(
            v,
            Op::LayerNorm { x, gamma, beta },
            self.needs(x) || self.needs(gamma) || self.needs(beta),
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = Array2::zeros(xv.raw_dim());
        for (mut out, row) in v.outer_iter_mut().zip(xv.outer_iter()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, o) in out.iter_mut().enumerate() {
                *o = (row[j] - max).exp();
                denom += *o;
            }
            out.mapv_inplace(|e| e / denom);
        }
        self.push(v, Op::SoftmaxRows(x), self.needs(x))
    }

    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|e| e.max(floor).ln());
        self.push(v, Op::LogClamped { x, floor }, self.needs(x))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = xv.clone();
        for mut row in v.outer_iter_mut() {
            let norm = row.iter().map(|&e| e * e).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            row.mapv_inplace(|e| e / denom);
        }
        self.push(v, Op::L2NormRows { x, eps }, self.needs(x))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&xv.row(i));
        }
        self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            self.needs(x),
        )
    }

    pub fn scatter_fill(
        &mut self,
        visible: NodeId,
        fill: NodeId,
        visible_idx: &[usize],
        fill_idx: &[usize],
    ) -> NodeId {
        let vis = &self.nodes[visible].value;
        let f = &self.nodes[fill].value;
        debug_assert_eq!(f.nrows(), 1);
        debug_assert_eq!(vis.ncols(), f.ncols());
        let n_total = visible_idx.len() + fill_idx.len();
        let mut v = Array2::zeros((n_total, vis.ncols()));
        for (r, &i) in visible_idx.iter().enumerate() {
            v.row_mut(i).assign(&vis.row(r));
        }
        for &i in fill_idx {
            v.row_mut(i).assign(&f.row(0));
        }
        self.push(
            v,
            Op::ScatterFill {
                visible,
                fill,
                visible_idx: visible_idx.to_vec(),
                fill_idx: fill_idx.to_vec(),
            },
            self.needs(visible) || self.needs(fill),
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len }, self.needs(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("column concat");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[x].value.sum());
        self.push(v, Op::SumAll(x), self.needs(x))
    }

    pub fn row_scale(&mut self, x: NodeId, factors: &[f64]) -> NodeId {
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.nrows(), factors.len());
        let mut v = xv.clone();
        for (mut row, &c) in v.outer_iter_mut().zip(factors) {
            row.mapv_inplace(|e| e * c);
        }
        self.push(
            v,
            Op::RowScale {
                x,
                factors: factors.to_vec(),
            },
            self.needs(x),
        )
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per
    /// node; slots that no gradient reached are `None`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.accumulate_parents(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn add_grad(
        &self,
        grads: &mut [Option<Array2<f64>>],
        id: NodeId,
        contribution: Array2<f64>,
    ) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_parents(
        &self,
        id: NodeId,
        dy: &Array2<f64>,
        grads: &mut Vec<Option<Array2<f64>>>,
    ) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da = dy.dot(&self.nodes[b].value.t());
                    self.add_grad(grads, a, da);
                }
                if self.needs(b) {
                    let db = self.nodes[a].value.t().dot(dy);
                    self.add_grad(grads, b, db);
                }
            }
            Op::Transpose(a) => self.add_grad(grads, *a, dy.t().to_owned()),
            Op::Add(a, b) => {
                self.add_grad(grads, *a, dy.clone());
                self.add_grad(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, dy.clone());
                self.add_grad(grads, *b, dy.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.add_grad(grads, a, dy * &self.nodes[b].value);
                }
                if self.needs(b) {
                    self.add_grad(grads, b, dy * &self.nodes[a].value);
                }
            }
            Op::Scale(a, c) => self.add_grad(grads, *a, dy.mapv(|e| e * c)),
            Op::AddRowVec(x, row) => {
                self.add_grad(grads, *x, dy.clone());
                if self.needs(*row) {
                    let summed = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(grads, *row, summed);
                }
            }
            Op::MulRowVec(x, row) => {
                let (x, row) = (*x, *row);
                if self.needs(x) {
                    self.add_grad(grads, x, dy * &self.nodes[row].value);
                }
                if self.needs(row) {
                    let prod = dy * &self.nodes[x].value;
                    let summed = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(grads, row, summed);
                }
            }
            Op::Gelu(x) => {
                let dx = dy * &self.nodes[*x].value.mapv(gelu_grad_scalar);
                self.add_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = &self.nodes[x].value;
                let g = &self.nodes[gamma].value;
                let d = xv.ncols() as f64;

                // Recompute per-row normalization terms.
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                let mut dx = Array2::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean = row.sum() / d;
                    let var =
                        row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let dyr = dy.row(r);

                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..xv.ncols() {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = dyr[j] * g[[0, j]];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        if self.needs(gamma) {
                            dgamma[[0, j]] += dyr[j] * xhat;
                        }
                        if self.needs(beta) {
                            dbeta[[0, j]] += dyr[j];
                        }
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    if self.needs(x) {
                        for j in 0..xv.ncols() {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = dyr[j] * g[[0, j]];
                            dx[[r, j]] =
                                inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                if self.needs(x) {
                    self.add_grad(grads, x, dx);
                }
                if self.needs(gamma) {
                    self.add_grad(grads, gamma, dgamma);
                }
                if self.needs(beta) {
                    self.add_grad(grads, beta, dbeta);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let mut dx = dy * y;
                for (mut dr, yr) in dx.outer_iter_mut().zip(y.outer_iter()) {
                    let s: f64 = dr.sum();
                    for (e, &yj) in dr.iter_mut().zip(yr.iter()) {
                        *e -= s * yj;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::LogClamped { x, floor } => {
                let xv = &self.nodes[*x].value;
                let mut dx = dy.clone();
                for (e, &xij) in dx.iter_mut().zip(xv.iter()) {
                    *e = if xij > *floor { *e / xij } else { 0.0 };
                }
                self.add_grad(grads, *x, dx);
            }
            Op::L2NormRows { x, eps } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Array2::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let dyr = dy.row(r);
                    let norm = row.iter().map(|&e| e * e).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = row.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum();
                        let n3 = norm * norm * norm;
                        for j in 0..xv.ncols() {
                            dx[[r, j]] = dyr[j] / norm - row[j] * dot / n3;
                        }
                    } else {
                        for j in 0..xv.ncols() {
                            dx[[r, j]] = dyr[j] / eps;
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut target = dx.row_mut(i);
                    target += &dy.row(r);
                }
                self.add_grad(grads, *x, dx);
            }
            Op::ScatterFill {
                visible,
                fill,
                visible_idx,
                fill_idx,
            } => {
                if self.needs(*visible) {
                    let mut dv =
                        Array2::zeros((visible_idx.len(), dy.ncols()));
                    for (r, &i) in visible_idx.iter().enumerate() {
                        dv.row_mut(r).assign(&dy.row(i));
                    }
                    self.add_grad(grads, *visible, dv);
                }
                if self.needs(*fill) {
                    let mut df = Array2::zeros((1, dy.ncols()));
                    for &i in fill_idx {
                        let mut target = df.row_mut(0);
                        target += &dy.row(i);
                    }
                    self.add_grad(grads, *fill, df);
                }
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(dy);
                self.add_grad(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.ncols();
                    if self.needs(p) {
                        let dp = dy.slice(s![.., offset..offset + w]).to_owned();
                        self.add_grad(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::SumAll(x) => {
                let c = dy[[0, 0]];
                let dx = Array2::from_elem(self.nodes[*x].value.raw_dim(), c);
                self.add_grad(grads, *x, dx);
            }
            Op::RowScale { x, factors } => {
                let mut dx = dy.clone();
                for (mut row, &c) in dx.outer_iter_mut().zip(factors) {
                    row.mapv_inplace(|e| e * c);
                }
                self.add_grad(grads, *x, dx);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for a node; zeros if nothing reached it.
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id].as_ref()
    }
}
