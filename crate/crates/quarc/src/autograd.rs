//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A `Tape` records a computation graph of `Array2<f64>` values; `backward`
//! walks the graph in reverse creation order and accumulates gradients.
//! Parameters live outside the tape in a `ParamStore`; a forward pass pulls
//! their current values in as `Op::Param` leaves and `Gradients::apply`
//! pushes the accumulated gradients back.
//!
//! Two ops have deliberately non-standard backward rules: `Detach` is the
//! stop-gradient operator (identity forward, no gradient flow), and
//! `GradReverse` is identity forward with the incoming gradient multiplied
//! by `-lambda` on the way back.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

/// One learnable matrix plus its gradient and optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub(crate) m: Array2<f64>,
    pub(crate) v: Array2<f64>,
    /// Whether weight decay applies (off for biases, gains, and the codebook).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, decay: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let shape = value.raw_dim();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            decay,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_l2_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_l2_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.mapv_inplace(|g| g * scale);
            }
        }
        norm
    }

    /// Deep copy of all parameter values, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Array2<f64>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Array2<f64>>) {
        for p in &mut self.params {
            if let Some(v) = snapshot.get(&p.name) {
                p.value.assign(v);
            }
        }
    }

    /// Copy values for every parameter whose name exists in `other`,
    /// matching by name. Returns the number of parameters copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name.get(&p.name) {
                let src = &other.params[src.0];
                if src.value.raw_dim() == p.value.raw_dim() {
                    p.value.assign(&src.value);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Draw an `rows x cols` matrix with i.i.d. normal(0, std^2) entries.
pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    // Box-Muller keeps this file free of a distributions dependency and
    // bit-reproducible across crate versions.
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a . b^T`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `(n x d) + (1 x d)` row broadcast.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    MaskedMean(NodeId, Vec<f64>),
    StackRows(NodeId, usize),
    Embed(NodeId, Vec<usize>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<f64>,
    },
    GradReverse(NodeId, f64),
    Detach(NodeId),
    Sum(NodeId),
    Sqrt(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one scalar loss with respect to every node on the tape.
pub struct Gradients {
    node_grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn of(&self, node: NodeId) -> Option<&Array2<f64>> {
        self.node_grads[node.0].as_ref()
    }

    /// Accumulate parameter-leaf gradients into the store.
    pub fn apply(&self, tape: &Tape, store: &mut ParamStore) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &self.node_grads[idx] {
                    store.get_mut(pid).grad += g;
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) + &self.value(row).row(0);
        self.push(value, Op::AddRow(x, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols row mismatch");
        let mut value = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        value.slice_mut(s![.., ..va.ncols()]).assign(va);
        value.slice_mut(s![.., va.ncols()..]).assign(vb);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(x, start, len))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut value = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                value[[i, j]] = g[j] * (v - mean) * inv_std + b[j];
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Mean over rows where `mask` is nonzero; errors when no row is live.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId> {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), mask.len(), "masked_mean mask length mismatch");
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Err(Error::EmptyInput(
                "pool over a fully masked sequence".into(),
            ));
        }
        let mut acc = Array2::zeros((1, xv.ncols()));
        for (i, row) in xv.rows().into_iter().enumerate() {
            if mask[i] != 0.0 {
                acc.row_mut(0).zip_mut_with(&row, |a, r| *a += r);
            }
        }
        acc.mapv_inplace(|v| v / count);
        Ok(self.push(acc, Op::MaskedMean(x, mask.to_vec())))
    }

    /// Replicate a `1 x d` row `n` times.
    pub fn stack_rows(&mut self, x: NodeId, n: usize) -> NodeId {
        let row = self.value(x).row(0).to_owned();
        let mut value = Array2::zeros((n, row.len()));
        for mut r in value.rows_mut() {
            r.assign(&row);
        }
        self.push(value, Op::StackRows(x, n))
    }

    /// Gather rows of `table` by index. Gradient scatters back into the
    /// gathered rows only.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        self.push(value, Op::Embed(table, ids.to_vec()))
    }

    /// Mean token negative log-likelihood over unmasked positions.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[f64]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), mask.len());
        let count: f64 = mask.iter().sum();
        assert!(count > 0.0, "cross_entropy over a fully masked sequence");
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            if mask[i] == 0.0 {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[targets[i]];
        }
        let value = Array2::from_elem((1, 1), total / count);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::GradReverse(x, lambda))
    }

    /// Stop-gradient: identity forward, zero backward.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::Detach(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(x))
    }

    /// Squared Frobenius distance between two same-shape nodes.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum(sq)
    }

    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { node_grads: grads }
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        use Op::*;
        match &self.nodes[idx].op {
            Const | Param(_) | Detach(_) => {}
            MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            MatMulNT(a, b) => {
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            AddRow(x, row) => {
                Self::accumulate(grads, *x, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                Self::accumulate(grads, *row, summed);
            }
            Mul(a, b) => {
                Self::accumulate(grads, *a, g * self.value(*b));
                Self::accumulate(grads, *b, g * self.value(*a));
            }
            Scale(x, c) => Self::accumulate(grads, *x, g * *c),
            ConcatCols(a, b) => {
                let na = self.value(*a).ncols();
                Self::accumulate(grads, *a, g.slice(s![.., ..na]).to_owned());
                Self::accumulate(grads, *b, g.slice(s![.., na..]).to_owned());
            }
            SliceCols(x, start, len) => {
                let mut dx = Array2::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(g);
                Self::accumulate(grads, *x, dx);
            }
            Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                Self::accumulate(grads, *x, g * &(y * &(1.0 - y)));
            }
            Tanh(x) => {
                let y = &self.nodes[idx].value;
                Self::accumulate(grads, *x, g * &(1.0 - y * y));
            }
            Relu(x) => {
                let mask = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                Self::accumulate(grads, *x, g * &mask);
            }
            Gelu(x) => {
                let d = self.value(*x).mapv(gelu_derivative);
                Self::accumulate(grads, *x, g * &d);
            }
            SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = Array2::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..y.ncols() {
                        dx[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).row(0).to_owned();
                let d = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dgain = Array2::zeros((1, xv.ncols()));
                let mut dbias = Array2::zeros((1, xv.ncols()));
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gy: Vec<f64> =
                        (0..xv.ncols()).map(|j| g[[i, j]] * gv[j]).collect();
                    let mean_gy = gy.iter().sum::<f64>() / d;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                    for j in 0..xv.ncols() {
                        dx[[i, j]] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                        dgain[[0, j]] += g[[i, j]] * xhat[j];
                        dbias[[0, j]] += g[[i, j]];
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gain, dgain);
                Self::accumulate(grads, *bias, dbias);
            }
            MaskedMean(x, mask) => {
                let count: f64 = mask.iter().sum();
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for (i, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = g[[0, j]] / count;
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            StackRows(x, _) => {
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                Self::accumulate(grads, *x, summed);
            }
            Embed(table, ids) => {
                let mut dt = Array2::zeros(self.value(*table).raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    dt.row_mut(id).zip_mut_with(&g.row(i), |a, b| *a += b);
                }
                Self::accumulate(grads, *table, dt);
            }
            CrossEntropy { logits, targets, mask } => {
                let lv = self.value(*logits);
                let count: f64 = mask.iter().sum();
                let gs = g[[0, 0]] / count;
                let mut dl = Array2::zeros(lv.raw_dim());
                for (i, row) in lv.rows().into_iter().enumerate() {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..lv.ncols() {
                        let p = exps[j] / sum;
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[[i, j]] = gs * (p - onehot);
                    }
                }
                Self::accumulate(grads, *logits, dl);
            }
            GradReverse(x, lambda) => Self::accumulate(grads, *x, g * -*lambda),
            Sum(x) => {
                let dx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                Self::accumulate(grads, *x, dx);
            }
            Sqrt(x) => {
                let y = &self.nodes[idx].value;
                let dx = g * &y.mapv(|v| if v > 1e-12 { 0.5 / v } else { 0.0 });
                Self::accumulate(grads, *x, dx);
            }
        }
    }
}

/// GELU, tanh approximation. Exactly zero at zero.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite differences of a scalar-valued function of one matrix.
    fn fd_grad(
        x: &Array2<f64>,
        mut f: impl FnMut(&Array2<f64>) -> f64,
        h: f64,
    ) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        let mut probe = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = probe[[i, j]];
                probe[[i, j]] = orig + h;
                let fp = f(&probe);
                probe[[i, j]] = orig - h;
                let fm = f(&probe);
                probe[[i, j]] = orig;
                out[[i, j]] = (fp - fm) / (2.0 * h);
            }
        }
        out
    }

    fn assert_close(ad: &Array2<f64>, fd: &Array2<f64>, tol: f64, what: &str) {
        for (a, b) in ad.iter().zip(fd.iter()) {
            assert!(
                (a - b).abs() <= tol * (1.0 + b.abs()),
                "{what}: autodiff {a} vs finite-diff {b}"
            );
        }
    }

    /// Check d loss / d x for a graph builder against finite differences.
    fn check_grad(
        x0: &Array2<f64>,
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
        what: &str,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let ad = grads.of(x).expect("gradient should reach the input").clone();
        let fd = fd_grad(
            x0,
            |xv| {
                let mut t = Tape::new();
                let xn = t.constant(xv.clone());
                let l = build(&mut t, xn);
                t.scalar(l)
            },
            1e-5,
        );
        assert_close(&ad, &fd, 1e-6, what);
    }

    #[test]
    fn matmul_grads_match_fd() {
        let mut r = rng(1);
        let x0 = normal_init(&mut r, 3, 4, 1.0);
        let w = normal_init(&mut r, 4, 2, 1.0);
        check_grad(
            &x0,
            |t, x| {
                let wn = t.constant(w.clone());
                let y = t.matmul(x, wn);
                let sq = t.mul(y, y);
                t.sum(sq)
            },
            "matmul",
        );
    }

    #[test]
    fn matmul_nt_grads_match_fd() {
        let mut r = rng(2);
        let x0 = normal_init(&mut r, 3, 4, 1.0);
        let b = normal_init(&mut r, 5, 4, 1.0);
        check_grad(
            &x0,
            |t, x| {
                let bn = t.constant(b.clone());
                let y = t.matmul_nt(x, bn);
                let sq = t.mul(y, y);
                t.sum(sq)
            },
            "matmul_nt",
        );
        // gradient w.r.t. the transposed operand
        let mut tape = Tape::new();
        let xn = tape.constant(x0.clone());
        let bn = tape.constant(b.clone());
        let y = tape.matmul_nt(xn, bn);
        let sq = tape.mul(y, y);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        let ad = grads.of(bn).unwrap().clone();
        let fd = fd_grad(
            &b,
            |bv| {
                let mut t = Tape::new();
                let xn = t.constant(x0.clone());
                let bn = t.constant(bv.clone());
                let y = t.matmul_nt(xn, bn);
                let sq = t.mul(y, y);
                t.scalar(t2(&mut t, sq))
            },
            1e-5,
        );
        assert_close(&ad, &fd, 1e-6, "matmul_nt rhs");
    }

    fn t2(t: &mut Tape, x: NodeId) -> NodeId {
        t.sum(x)
    }

    #[test]
    fn elementwise_op_grads_match_fd() {
        let mut r = rng(3);
        let x0 = normal_init(&mut r, 4, 5, 1.5);
        check_grad(&x0, |t, x| { let y = t.sigmoid(x); t.sum(y) }, "sigmoid");
        check_grad(&x0, |t, x| { let y = t.tanh(x); t.sum(y) }, "tanh");
        check_grad(&x0, |t, x| { let y = t.gelu(x); t.sum(y) }, "gelu");
        check_grad(
            &x0,
            |t, x| {
                let y = t.mul(x, x);
                let z = t.scale(y, 0.3);
                t.sum(z)
            },
            "mul/scale",
        );
        let pos = x0.mapv(|v| v.abs() + 0.5);
        check_grad(&pos, |t, x| { let y = t.sqrt(x); t.sum(y) }, "sqrt");
    }

    #[test]
    fn relu_grad_matches_fd_away_from_kink() {
        let mut r = rng(4);
        // keep entries away from 0 so central differences are valid
        let x0 = normal_init(&mut r, 4, 4, 1.0).mapv(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        check_grad(&x0, |t, x| { let y = t.relu(x); let s = t.mul(y, y); t.sum(s) }, "relu");
    }

    #[test]
    fn softmax_and_ce_grads_match_fd() {
        let mut r = rng(5);
        let x0 = normal_init(&mut r, 3, 6, 1.0);
        let w = normal_init(&mut r, 6, 6, 0.7);
        check_grad(
            &x0,
            |t, x| {
                let y = t.softmax_rows(x);
                let wn = t.constant(w.clone());
                let z = t.mul(y, wn.pipe_noop(t));
                t.sum(z)
            },
            "softmax",
        );
        let targets = vec![2, 0, 5];
        let mask = vec![1.0, 1.0, 0.0];
        check_grad(
            &x0,
            |t, x| t.cross_entropy(x, &targets, &mask),
            "cross_entropy",
        );
    }

    // helper so the closure above can reuse a captured constant node id
    trait Pipe {
        fn pipe_noop(self, _t: &Tape) -> Self;
    }
    impl Pipe for NodeId {
        fn pipe_noop(self, _t: &Tape) -> Self {
            self
        }
    }

    #[test]
    fn layer_norm_grads_match_fd() {
        let mut r = rng(6);
        let x0 = normal_init(&mut r, 4, 8, 1.2);
        let gain = normal_init(&mut r, 1, 8, 0.3).mapv(|v| v + 1.0);
        let bias = normal_init(&mut r, 1, 8, 0.3);
        check_grad(
            &x0,
            |t, x| {
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                let y = t.layer_norm(x, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.sum(sq)
            },
            "layer_norm x",
        );
        // gain and bias gradients
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let g = tape.constant(gain.clone());
        let b = tape.constant(bias.clone());
        let y = tape.layer_norm(x, g, b, 1e-5);
        let sq = tape.mul(y, y);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        let fd_gain = fd_grad(
            &gain,
            |gv| {
                let mut t = Tape::new();
                let x = t.constant(x0.clone());
                let g = t.constant(gv.clone());
                let b = t.constant(bias.clone());
                let y = t.layer_norm(x, g, b, 1e-5);
                let sq = t.mul(y, y);
                let l = t.sum(sq);
                t.scalar(l)
            },
            1e-5,
        );
        assert_close(grads.of(g).unwrap(), &fd_gain, 1e-6, "layer_norm gain");
    }

    #[test]
    fn structural_op_grads_match_fd() {
        let mut r = rng(7);
        let x0 = normal_init(&mut r, 3, 4, 1.0);
        let other = normal_init(&mut r, 3, 2, 1.0);
        check_grad(
            &x0,
            |t, x| {
                let o = t.constant(other.clone());
                let c = t.concat_cols(x, o);
                let sq = t.mul(c, c);
                t.sum(sq)
            },
            "concat_cols",
        );
        check_grad(
            &x0,
            |t, x| {
                let sl = t.slice_cols(x, 1, 2);
                let sq = t.mul(sl, sl);
                t.sum(sq)
            },
            "slice_cols",
        );
        let mask = vec![1.0, 0.0, 1.0];
        check_grad(
            &x0,
            |t, x| {
                let m = t.masked_mean(x, &mask).unwrap();
                let sq = t.mul(m, m);
                t.sum(sq)
            },
            "masked_mean",
        );
        let row = normal_init(&mut r, 1, 4, 1.0);
        check_grad(
            &row,
            |t, x| {
                let st = t.stack_rows(x, 5);
                let sq = t.mul(st, st);
                t.sum(sq)
            },
            "stack_rows",
        );
        check_grad(
            &x0,
            |t, x| {
                let r = t.constant(row.clone());
                let y = t.add_row(x, r);
                let sq = t.mul(y, y);
                t.sum(sq)
            },
            "add_row lhs",
        );
    }

    #[test]
    fn embed_grad_scatters_to_gathered_rows_only() {
        let mut r = rng(8);
        let table = normal_init(&mut r, 6, 3, 1.0);
        let ids = vec![2, 2, 5];
        let mut tape = Tape::new();
        let t_node = tape.constant(table.clone());
        let e = tape.embed(t_node, &ids);
        let sq = tape.mul(e, e);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        let g = grads.of(t_node).unwrap();
        for row in [0, 1, 3, 4] {
            assert!(g.row(row).iter().all(|v| *v == 0.0), "untouched row has gradient");
        }
        // row 2 was gathered twice: gradient 2 * 2*x
        for j in 0..3 {
            let expect = 4.0 * table[[2, j]];
            assert!((g[[2, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut r = rng(9);
        let x0 = normal_init(&mut r, 2, 3, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let d = tape.detach(x);
        let sq = tape.mul(d, d);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        assert!(grads.of(x).is_none(), "gradient must not cross detach");
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        let mut r = rng(10);
        let x0 = normal_init(&mut r, 2, 3, 1.0);
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let rev = tape.grad_reverse(x, lambda);
            let loss = tape.sum(rev);
            assert_eq!(tape.value(rev), &x0, "forward must be identity");
            let grads = tape.backward(loss);
            let g = grads.of(x).unwrap();
            for v in g.iter() {
                assert_eq!(*v, -lambda, "gradient of sum through reversal");
            }
        }
    }

    #[test]
    fn param_grads_accumulate_into_store() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let w = store.add("w", normal_init(&mut r, 2, 2, 1.0), true);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let sq = tape.mul(wn, wn);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        grads.apply(&tape, &mut store);
        let expect = store.value(w) * 2.0;
        assert_eq!(store.get(w).grad, expect);
    }

    #[test]
    fn clip_scales_gradients_to_max_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array2::zeros((1, 2)), true);
        store.get_mut(w).grad = ndarray::arr2(&[[3.0, 4.0]]);
        let norm = store.clip_global_norm(1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((store.grad_l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let mut r = rng(12);
        let x0 = normal_init(&mut r, 5, 7, 3.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn normal_init_is_seed_deterministic() {
        let a = normal_init(&mut rng(5), 4, 4, 0.02);
        let b = normal_init(&mut rng(5), 4, 4, 0.02);
        assert_eq!(a, b);
    }
}
