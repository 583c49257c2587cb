//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is f64 and single-threaded; reductions run in a fixed
//! sequential row-major order so repeated evaluation of the same graph is
//! bit-identical. The op set is exactly what the entropy model needs.

use std::collections::HashMap;

use crate::error::{LoccError, Result};

/// Row-major dense tensor. Scalars are [1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(&[1, 1], vec![v])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Identifier of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named model parameters with gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(&value.shape));
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in &self.grads {
            for v in &g.data {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.data.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    /// a [n,d] x b [m,d]^T -> [n,m]
    MatmulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x [n,d] + bias [1,d] broadcast over rows
    AddBias(Var, Var),
    /// per-row scalar multiply
    MulRows(Var, Vec<f64>),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Embed {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    NeighborMax {
        x: Var,
        winners: Vec<usize>,
    },
    Mean(Var),
    CrossEntropyBits {
        probs: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    /// Set when a cross-entropy evaluation had to clamp a zero probability.
    pub clamped_loss: bool,
}

const CE_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            clamped_loss: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(LoccError::NonFinite(op_name(&op).to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Bring a parameter's current value onto the tape; `backward`
    /// accumulates its gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(LoccError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::Matmul(a, b))
    }

    /// `a [n,d] x b[m,d]^T -> [n,m]` (attention scores).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.cols() {
            return Err(LoccError::ShapeMismatch(format!(
                "matmul_t {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (n, d, m) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &ta.data[i * d..(i + 1) * d];
            for j in 0..m {
                let brow = &tb.data[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for p in 0..d {
                    acc += arow[p] * brow[p];
                }
                out[i * m + j] = acc;
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::MatmulT(a, b))
    }

    fn elementwise(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(LoccError::ShapeMismatch(format!(
                "elementwise {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape.clone();
        self.push(Tensor::from_vec(&shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(LoccError::ShapeMismatch(format!(
                "add_bias {:?} + {:?}",
                tx.shape, tb.shape
            )));
        }
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(tx.data[i * d + j] + tb.data[j]);
            }
        }
        self.push(Tensor::from_vec(&[n, d], data), Op::AddBias(x, bias))
    }

    /// Multiply each row by a fixed (non-differentiated) scalar mask.
    pub fn mul_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if mask.len() != tx.rows() {
            return Err(LoccError::ShapeMismatch(format!(
                "mul_rows mask {} for {} rows",
                mask.len(),
                tx.rows()
            )));
        }
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(tx.data[i * d + j] * mask[i]);
            }
        }
        self.push(
            Tensor::from_vec(&[n, d], data),
            Op::MulRows(x, mask.to_vec()),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|v| v * s).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Sigmoid(x))
    }

    /// Row-wise layer normalization with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        let tg = &self.nodes[gain.0].value;
        let tb = &self.nodes[bias.0].value;
        if tg.cols() != d || tb.cols() != d || tg.rows() != 1 || tb.rows() != 1 {
            return Err(LoccError::ShapeMismatch("layer_norm gain/bias".into()));
        }
        let mut data = Vec::with_capacity(n * d);
        let mut rstds = Vec::with_capacity(n);
        for i in 0..n {
            let row = &tx.data[i * d..(i + 1) * d];
            let mut mean = 0.0;
            for &v in row {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            rstds.push(rstd);
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                data.push(tg.data[j] * xhat + tb.data[j]);
            }
        }
        self.push(
            Tensor::from_vec(&[n, d], data),
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd: rstds,
            },
        )
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &tx.data[i * d..(i + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for &v in row {
                max = max.max(v);
            }
            let mut sum = 0.0;
            let base = data.len();
            for &v in row {
                let e = (v - max).exp();
                data.push(e);
                sum += e;
            }
            for v in &mut data[base..] {
                *v /= sum;
            }
        }
        self.push(Tensor::from_vec(&[n, d], data), Op::SoftmaxRows(x))
    }

    /// Row lookup into an embedding table.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(LoccError::IndexOutOfBounds(format!(
                    "embedding index {ix} into table of {v}"
                )));
            }
            data.extend_from_slice(&tt.data[ix * d..(ix + 1) * d]);
        }
        self.push(
            Tensor::from_vec(&[indices.len(), d], data),
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != n {
                return Err(LoccError::ShapeMismatch("concat_cols row count".into()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let d = t.cols();
                data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
            }
        }
        self.push(
            Tensor::from_vec(&[n, total], data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        if start + len > d {
            return Err(LoccError::IndexOutOfBounds(format!(
                "slice_cols {start}..{} of {d}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&tx.data[i * d + start..i * d + start + len]);
        }
        self.push(Tensor::from_vec(&[n, len], data), Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(LoccError::IndexOutOfBounds(format!(
                    "gather row {r} of {n}"
                )));
            }
            data.extend_from_slice(&tx.data[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::from_vec(&[rows.len(), d], data),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0].0].value.cols();
        let mut n = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != d {
                return Err(LoccError::ShapeMismatch("concat_rows col count".into()));
            }
            n += t.rows();
        }
        let mut data = Vec::with_capacity(n * d);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push(
            Tensor::from_vec(&[n, d], data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Channel-wise max over each output's neighbor rows. Ties pick the
    /// first listed neighbor so gradients route deterministically.
    pub fn neighbor_max(&mut self, x: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        let m = neighbors.len();
        let mut data = Vec::with_capacity(m * d);
        let mut winners = Vec::with_capacity(m * d);
        for list in neighbors {
            if list.is_empty() {
                return Err(LoccError::ShapeMismatch("empty neighborhood".into()));
            }
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut win = 0usize;
                for &j in list {
                    if j >= n {
                        return Err(LoccError::IndexOutOfBounds(format!(
                            "neighbor row {j} of {n}"
                        )));
                    }
                    let v = tx.data[j * d + c];
                    if v > best {
                        best = v;
                        win = j;
                    }
                }
                data.push(best);
                winners.push(win);
            }
        }
        self.push(
            Tensor::from_vec(&[m, d], data),
            Op::NeighborMax { x, winners },
        )
    }

    /// Mean over all entries -> scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let mut acc = 0.0;
        for &v in &tx.data {
            acc += v;
        }
        acc /= tx.data.len() as f64;
        self.push(Tensor::scalar(acc), Op::Mean(x))
    }

    /// Mean of -log2 p[target] over rows, the bits-per-symbol objective.
    /// Zero probabilities are clamped at 1e-12 and flagged on the tape.
    pub fn cross_entropy_bits(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let tp = &self.nodes[probs.0].value;
        let (n, d) = (tp.rows(), tp.cols());
        if targets.len() != n {
            return Err(LoccError::ShapeMismatch(format!(
                "{} targets for {n} rows",
                targets.len()
            )));
        }
        let mut acc = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= d {
                return Err(LoccError::IndexOutOfBounds(format!("target {t} of {d}")));
            }
            let p = tp.data[i * d + t];
            let p = if p < CE_EPS {
                self.clamped_loss = true;
                CE_EPS
            } else {
                p
            };
            acc += -p.log2();
        }
        acc /= n as f64;
        self.push(
            Tensor::scalar(acc),
            Op::CrossEntropyBits {
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Reverse-mode sweep from a scalar loss; parameter gradients are
    /// accumulated into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.data.len() != 1 {
            return Err(LoccError::TapeUsage(format!(
                "backward from non-scalar {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let dst = store.grad_mut(*pid);
                    for (d, s) in dst.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = dC * B^T
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(&ta.shape));
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.data[i * m + j] * tb.data[p * m + j];
                            }
                            ga.data[i * k + p] += acc;
                        }
                    }
                    // dB = A^T * dC
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(&tb.shape));
                    for p in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += ta.data[i * k + p] * g.data[i * m + j];
                            }
                            gb.data[p * m + j] += acc;
                        }
                    }
                }
                Op::MatmulT(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, d, m) = (ta.rows(), ta.cols(), tb.rows());
                    // C = A B^T: dA = dC * B, dB = dC^T * A
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(&ta.shape));
                    for i in 0..n {
                        for p in 0..d {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.data[i * m + j] * tb.data[j * d + p];
                            }
                            ga.data[i * d + p] += acc;
                        }
                    }
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(&tb.shape));
                    for j in 0..m {
                        for p in 0..d {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += g.data[i * m + j] * ta.data[i * d + p];
                            }
                            gb.data[j * d + p] += acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g.data, &g.shape);
                    accumulate(&mut grads, *b, &g.data, &g.shape);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g.data, &g.shape);
                    let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg, &g.shape);
                }
                Op::Mul(a, b) => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        (
                            g.data.iter().zip(&tb.data).map(|(gv, bv)| gv * bv).collect(),
                            g.data.iter().zip(&ta.data).map(|(gv, av)| gv * av).collect(),
                        )
                    };
                    accumulate(&mut grads, *a, &da, &g.shape);
                    accumulate(&mut grads, *b, &db, &g.shape);
                }
                Op::AddBias(x, bias) => {
                    accumulate(&mut grads, *x, &g.data, &g.shape);
                    let d = g.cols();
                    let mut col = vec![0.0; d];
                    for i in 0..g.rows() {
                        for j in 0..d {
                            col[j] += g.data[i * d + j];
                        }
                    }
                    accumulate(&mut grads, *bias, &col, &[1, d]);
                }
                Op::MulRows(x, mask) => {
                    let d = g.cols();
                    let mut dx = Vec::with_capacity(g.data.len());
                    for i in 0..g.rows() {
                        for j in 0..d {
                            dx.push(g.data[i * d + j] * mask[i]);
                        }
                    }
                    accumulate(&mut grads, *x, &dx, &g.shape);
                }
                Op::Scale(x, s) => {
                    let dx: Vec<f64> = g.data.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *x, &dx, &g.shape);
                }
                Op::Silu(x) => {
                    let tx = &self.nodes[x.0].value;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&tx.data)
                        .map(|(gv, &v)| {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, &dx, &g.shape);
                }
                Op::Sigmoid(x) => {
                    let ty = &node.value;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&ty.data)
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *x, &dx, &g.shape);
                }
                Op::LayerNorm { x, gain, bias, rstd } => {
                    let tx = &self.nodes[x.0].value;
                    let tg = &self.nodes[gain.0].value;
                    let (n, d) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; n * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..n {
                        let row = &tx.data[i * d..(i + 1) * d];
                        let mut mean = 0.0;
                        for &v in row {
                            mean += v;
                        }
                        mean /= d as f64;
                        let rs = rstd[i];
                        // xhat, dxhat, and the two row means the backward needs
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mean) * rs;
                            let dxh = g.data[i * d + j] * tg.data[j];
                            m1 += dxh;
                            m2 += dxh * xh;
                            dgain[j] += g.data[i * d + j] * xh;
                            dbias[j] += g.data[i * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xh = (row[j] - mean) * rs;
                            let dxh = g.data[i * d + j] * tg.data[j];
                            dx[i * d + j] = rs * (dxh - m1 - xh * m2);
                        }
                    }
                    accumulate(&mut grads, *x, &dx, &tx.shape.clone());
                    accumulate(&mut grads, *gain, &dgain, &[1, d]);
                    accumulate(&mut grads, *bias, &dbias, &[1, d]);
                }
                Op::SoftmaxRows(x) => {
                    let ty = &node.value;
                    let (n, d) = (ty.rows(), ty.cols());
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g.data[i * d + j] * ty.data[i * d + j];
                        }
                        for j in 0..d {
                            dx[i * d + j] = ty.data[i * d + j] * (g.data[i * d + j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &dx, &ty.shape.clone());
                }
                Op::Embed { table, indices } => {
                    let tt = &self.nodes[table.0].value;
                    let d = tt.cols();
                    let shape = tt.shape.clone();
                    let gt = grads[table.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt.data[ix * d + j] += g.data[i * d + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut start = 0;
                    for &p in parts {
                        let d = self.nodes[p.0].value.cols();
                        let total = g.cols();
                        let mut dp = Vec::with_capacity(n * d);
                        for i in 0..n {
                            dp.extend_from_slice(&g.data[i * total + start..i * total + start + d]);
                        }
                        accumulate(&mut grads, p, &dp, &[n, d]);
                        start += d;
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = &self.nodes[x.0].value;
                    let (n, d) = (tx.rows(), tx.cols());
                    let len = g.cols();
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..len {
                            dx[i * d + start + j] = g.data[i * len + j];
                        }
                    }
                    accumulate(&mut grads, *x, &dx, &[n, d]);
                }
                Op::GatherRows { x, rows } => {
                    let tx = &self.nodes[x.0].value;
                    let (n, d) = (tx.rows(), tx.cols());
                    let shape = vec![n, d];
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx.data[r * d + j] += g.data[i * d + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let d = g.cols();
                    let mut row = 0;
                    for &p in parts {
                        let pn = self.nodes[p.0].value.rows();
                        let dp = &g.data[row * d..(row + pn) * d];
                        accumulate(&mut grads, p, dp, &[pn, d]);
                        row += pn;
                    }
                }
                Op::NeighborMax { x, winners } => {
                    let tx = &self.nodes[x.0].value;
                    let d = tx.cols();
                    let shape = tx.shape.clone();
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for (flat, &win) in winners.iter().enumerate() {
                        let c = flat % d;
                        gx.data[win * d + c] += g.data[flat];
                    }
                }
                Op::Mean(x) => {
                    let tx = &self.nodes[x.0].value;
                    let v = g.data[0] / tx.data.len() as f64;
                    let dx = vec![v; tx.data.len()];
                    accumulate(&mut grads, *x, &dx, &tx.shape.clone());
                }
                Op::CrossEntropyBits { probs, targets } => {
                    let tp = &self.nodes[probs.0].value;
                    let (n, d) = (tp.rows(), tp.cols());
                    let ln2 = std::f64::consts::LN_2;
                    let mut dp = vec![0.0; n * d];
                    for (i, &t) in targets.iter().enumerate() {
                        let p = tp.data[i * d + t];
                        if p >= CE_EPS {
                            dp[i * d + t] = -g.data[0] / (n as f64 * ln2 * p);
                        }
                    }
                    accumulate(&mut grads, *probs, &dp, &[n, d]);
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: &[f64], shape: &[usize]) {
    let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    for (d, s) in g.data.iter_mut().zip(delta) {
        *d += s;
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Matmul(..) => "matmul",
        Op::MatmulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::MulRows(..) => "mul_rows",
        Op::Scale(..) => "scale",
        Op::Silu(_) => "silu",
        Op::Sigmoid(_) => "sigmoid",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows(_) => "softmax",
        Op::Embed { .. } => "embed",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::NeighborMax { .. } => "neighbor_max",
        Op::Mean(_) => "mean",
        Op::CrossEntropyBits { .. } => "cross_entropy",
    }
}

/// Central finite-difference gradient check used by tests.
///
/// `forward` must rebuild the computation from the store's current values
/// and return the scalar loss. Returns the max relative error over all
/// parameter entries.
pub fn grad_check<F>(store: &mut ParamStore, mut forward: F, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    tape.backward(loss, store)?;

    let mut max_rel = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.value(id).data.len() {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + h;
            let mut tp = Tape::new();
            let vp = forward(&mut tp, store)?;
            let fp = tp.value(vp).data[0];
            store.value_mut(id).data[k] = orig - h;
            let mut tm = Tape::new();
            let vm = forward(&mut tm, store)?;
            let fm = tm.value(vm).data[0];
            store.value_mut(id).data[k] = orig;

            let fd = (fp - fm) / (2.0 * h);
            let an = store.grad(id).data[k];
            let denom = fd.abs().max(an.abs()).max(1.0);
            max_rel = max_rel.max((fd - an).abs() / denom);
        }
    }
    Ok(max_rel)
}
