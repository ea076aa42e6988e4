//! Reverse-mode autodiff tape.
//!
//! Operations append nodes in topological order; [`Tape::backward`] walks the
//! record once in reverse. Gradients of leaf nodes accumulate across backward
//! calls (two calls double them); intermediate gradients are reset at the
//! start of each call so re-propagation stays correct.
//!
//! Activations are kept two-dimensional (`[rows, features]`) throughout; the
//! fused causal-attention op is told the batch size explicitly instead of
//! carrying a `[B, T, ...]` shape around.
//!
//! Shape mismatches and invalid ids are programmer errors and panic; only
//! conditions a caller can plausibly hit with bad data (non-scalar loss,
//! fully-ignored targets) surface as [`TapeError`].

use super::kernels;
use super::{Scalar, Tensor};

pub type NodeId = usize;

/// Target marker for positions excluded from the cross-entropy mean.
pub const IGNORE_TARGET: u32 = u32::MAX;

const CAUSAL_MASK_OFFSET: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross entropy: every target position is ignored")]
    AllTargetsIgnored,
}

enum Op<T: Scalar> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    AddBiasRow { x: NodeId, bias: NodeId },
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    CausalMask { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<T>, rstd: Vec<T> },
    Embedding { table: NodeId, ids: Vec<u32> },
    Dropout { x: NodeId, rate: f64, seed: u64 },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    CausalAttention { qkv: NodeId, batch: usize, n_heads: usize, probs: Tensor<T>, drop_rate: f64, drop_seed: u64 },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, live: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id].grad.as_ref()
    }

    /// Gradient of `id`, or zeros when the node was unreachable from the loss.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<T> {
        match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id].value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise and shape ops -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let data = self.value(x).data().iter().map(|v| *v * c).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::Scale { x, c })
    }

    /// `x: [rows, n] + bias: [n]`, broadcast over rows.
    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(bias).shape(), &[n], "add_bias_row: bias shape");
        let bvals = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bvals[i % n])
            .collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::AddBiasRow { x, bias })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let out = self.value(x).reshaped(shape);
        self.push(out, Op::Reshape { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.as_f64();
        }
        self.push(Tensor::scalar(T::from_f64(acc)), Op::Sum { x })
    }

    // ---- dense ops ------------------------------------------------------

    /// `a: [rows, k] . b: [k, n]`, or `a . b^T` for `b: [n, k]`.
    pub fn matmul_ext(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (m, k) = (self.value(a).rows(), self.value(a).last_dim());
        let bshape = self.value(b).shape();
        assert_eq!(bshape.len(), 2, "matmul: rhs must be 2-d");
        let (n, bk) = if transpose_b { (bshape[0], bshape[1]) } else { (bshape[1], bshape[0]) };
        assert_eq!(k, bk, "matmul: inner dims {k} vs {bk}");
        let mut out = vec![T::zero(); m * n];
        if transpose_b {
            kernels::matmul_bt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        } else {
            kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        }
        let mut shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            shape = vec![1];
        }
        *shape.last_mut().unwrap() = n;
        let out = Tensor::from_vec(&shape, out);
        self.push(out, Op::MatMul { a, b, transpose_b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_ext(a, b, false)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| gelu_fwd(*v)).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::Gelu { x })
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::Softmax { x })
    }

    /// Additive causal mask over `[batch * t, t]` score rows: entries with
    /// column > row (within each batch block) get a large negative offset so
    /// the following softmax zeroes them exactly.
    pub fn causal_mask(&mut self, x: NodeId, batch: usize) -> NodeId {
        let t = self.value(x).last_dim();
        let rows = self.value(x).rows();
        assert_eq!(rows, batch * t, "causal_mask: expected {batch}x{t} rows");
        let mask = T::from_f64(CAUSAL_MASK_OFFSET);
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(t).enumerate() {
            let i = r % t;
            for v in row.iter_mut().skip(i + 1) {
                *v = *v + mask;
            }
        }
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::CausalMask { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(gain).shape(), &[n], "layer_norm: gain shape");
        assert_eq!(self.value(bias).shape(), &[n], "layer_norm: bias shape");
        let rows = self.value(x).rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); rows * n];
        let gvals = self.value(gain).data();
        let bvals = self.value(bias).data();
        let nf = T::from_f64(n as f64);
        let epsv = T::from_f64(eps);
        for (r, row) in self.value(x).data().chunks(n).enumerate() {
            let mut mu = T::zero();
            for v in row {
                mu = mu + *v;
            }
            mu = mu / nf;
            let mut var = T::zero();
            for v in row {
                let c = *v - mu;
                var = var + c * c;
            }
            var = var / nf;
            let rs = T::one() / (var + epsv).sqrt();
            mean.push(mu);
            rstd.push(rs);
            let orow = &mut data[r * n..(r + 1) * n];
            for (j, v) in row.iter().enumerate() {
                orow[j] = (*v - mu) * rs * gvals[j] + bvals[j];
            }
        }
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::LayerNorm { x, gain, bias, mean, rstd })
    }

    /// Gather rows of `table: [v, d]` at `ids`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let shape = self.value(table).shape();
        assert_eq!(shape.len(), 2, "embedding: table must be 2-d");
        let (v, d) = (shape[0], shape[1]);
        let tdata = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "embedding: id {id} out of range {v}");
            data.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Inverted-scaling dropout; `rate == 0` is the identity. The keep mask is
    /// a pure function of `(seed, element index)` so backward recomputes it.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        let data = if rate == 0.0 {
            self.value(x).data().to_vec()
        } else {
            let inv = T::from_f64(1.0 / (1.0 - rate));
            self.value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| if keep(seed, i as u64, rate) { *v * inv } else { T::zero() })
                .collect()
        };
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::Dropout { x, rate, seed })
    }

    /// Fused multi-head causal self-attention.
    ///
    /// `qkv: [batch * t, 3 * d]` (query, key, value concatenated per
    /// position), output `[batch * t, d]`. Scores are scaled by
    /// `1/sqrt(d/n_heads)`, causally masked, softmaxed, optionally dropped
    /// out, then applied to the values. The softmax output is retained for
    /// backward.
    pub fn causal_attention(
        &mut self,
        qkv: NodeId,
        batch: usize,
        n_heads: usize,
        drop_rate: f64,
        drop_seed: u64,
    ) -> NodeId {
        let rows = self.value(qkv).rows();
        let three_d = self.value(qkv).last_dim();
        assert_eq!(three_d % 3, 0, "attention: qkv trailing dim must be 3*d");
        let d = three_d / 3;
        assert_eq!(d % n_heads, 0, "attention: d {d} not divisible by heads {n_heads}");
        assert_eq!(rows % batch, 0, "attention: rows {rows} not divisible by batch {batch}");
        let t = rows / batch;
        let dh = d / n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let qkv_data = self.value(qkv).data();
        let mut probs = Tensor::<T>::zeros(&[batch * n_heads, t * t]);
        let head_outs = attention_forward(
            qkv_data, probs.data_mut(), n_heads, t, d, scale, drop_rate, drop_seed,
        );
        let mut out = vec![T::zero(); rows * d];
        for (bh, buf) in head_outs.iter().enumerate() {
            let (b, h) = (bh / n_heads, bh % n_heads);
            for tt in 0..t {
                let dst = (b * t + tt) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&buf[tt * dh..(tt + 1) * dh]);
            }
        }
        let out = Tensor::from_vec(&[rows, d], out);
        self.push(out, Op::CausalAttention { qkv, batch, n_heads, probs, drop_rate, drop_seed })
    }

    /// Mean cross-entropy of `logits: [rows, v]` against `targets`
    /// (`IGNORE_TARGET` rows excluded). Fails if every row is ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId, TapeError> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        assert_eq!(targets.len(), rows, "cross_entropy: target count");
        let live = targets.iter().filter(|t| **t != IGNORE_TARGET).count();
        if live == 0 {
            return Err(TapeError::AllTargetsIgnored);
        }
        let mut acc = 0.0f64;
        for (row, &tg) in self.value(logits).data().chunks(v).zip(targets) {
            if tg == IGNORE_TARGET {
                continue;
            }
            assert!((tg as usize) < v, "cross_entropy: target {tg} out of range {v}");
            acc += log_sum_exp(row) - row[tg as usize].as_f64();
        }
        let loss = Tensor::scalar(T::from_f64(acc / live as f64));
        Ok(self.push(loss, Op::CrossEntropy { logits, targets: targets.to_vec(), live }))
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(TapeError::NonScalarLoss(self.nodes[loss].value.shape().to_vec()));
        }
        // Reset intermediate gradients; leaves accumulate across calls.
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        add_grad(&mut self.nodes[loss], &Tensor::scalar(T::one()));

        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let g = node.grad.as_ref().unwrap().clone();
            match &node.op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    add_grad(&mut before[*a], &g);
                    add_grad(&mut before[*b], &g);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = ew_mul(&g, &before[b].value);
                    let db = ew_mul(&g, &before[a].value);
                    add_grad(&mut before[a], &da);
                    add_grad(&mut before[b], &db);
                }
                Op::Scale { x, c } => {
                    let dx = ew_scale(&g, *c);
                    add_grad(&mut before[*x], &dx);
                }
                Op::AddBiasRow { x, bias } => {
                    let n = g.last_dim();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d = *d + *v;
                        }
                    }
                    add_grad(&mut before[*x], &g);
                    add_grad(&mut before[*bias], &Tensor::from_vec(&[n], db));
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (a, b, tb) = (*a, *b, *transpose_b);
                    let m = g.rows();
                    let n = g.last_dim();
                    let k = before[a].value.last_dim();
                    let mut da = vec![T::zero(); m * k];
                    if tb {
                        kernels::matmul(g.data(), before[b].value.data(), &mut da, m, n, k);
                    } else {
                        kernels::matmul_bt(g.data(), before[b].value.data(), &mut da, m, n, k);
                    }
                    let mut db = vec![T::zero(); before[b].value.len()];
                    if tb {
                        kernels::matmul_at(g.data(), before[a].value.data(), &mut db, m, n, k);
                    } else {
                        kernels::matmul_at(before[a].value.data(), g.data(), &mut db, m, k, n);
                    }
                    let da = Tensor::from_vec(before[a].value.shape(), da);
                    let db = Tensor::from_vec(before[b].value.shape(), db);
                    add_grad(&mut before[a], &da);
                    add_grad(&mut before[b], &db);
                }
                Op::Gelu { x } => {
                    let dx: Vec<T> = before[*x]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(xv, gv)| gelu_bwd(*xv) * *gv)
                        .collect();
                    let dx = Tensor::from_vec(g.shape(), dx);
                    add_grad(&mut before[*x], &dx);
                }
                Op::Softmax { x } => {
                    let n = node.value.last_dim();
                    let mut dx = vec![T::zero(); node.value.len()];
                    for ((prow, grow), drow) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(dx.chunks_mut(n))
                    {
                        softmax_bwd_row(prow, grow, drow);
                    }
                    let dx = Tensor::from_vec(g.shape(), dx);
                    add_grad(&mut before[*x], &dx);
                }
                Op::CausalMask { x } => {
                    add_grad(&mut before[*x], &g);
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let n = node.value.last_dim();
                    let nf = T::from_f64(n as f64);
                    let gvals = before[gain].value.data().to_vec();
                    let mut dgain = vec![T::zero(); n];
                    let mut dbias = vec![T::zero(); n];
                    let mut dx = vec![T::zero(); before[x].value.len()];
                    for (r, (xrow, grow)) in before[x]
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .enumerate()
                    {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * rs;
                            let dxhat = grow[j] * gvals[j];
                            dgain[j] = dgain[j] + grow[j] * xhat;
                            dbias[j] = dbias[j] + grow[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let m1 = sum_dxhat / nf;
                        let m2 = sum_dxhat_xhat / nf;
                        let drow = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * rs;
                            let dxhat = grow[j] * gvals[j];
                            drow[j] = rs * (dxhat - m1 - xhat * m2);
                        }
                    }
                    let dx = Tensor::from_vec(before[x].value.shape(), dx);
                    add_grad(&mut before[x], &dx);
                    add_grad(&mut before[gain], &Tensor::from_vec(&[n], dgain));
                    add_grad(&mut before[bias], &Tensor::from_vec(&[n], dbias));
                }
                Op::Embedding { table, ids } => {
                    let d = node.value.last_dim();
                    let mut dt = Tensor::zeros(before[*table].value.shape());
                    // Ids may repeat, so the scatter-add stays sequential.
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (dv, gv) in dst.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                            *dv = *dv + *gv;
                        }
                    }
                    add_grad(&mut before[*table], &dt);
                }
                Op::Dropout { x, rate, seed } => {
                    let dx = if *rate == 0.0 {
                        g.clone()
                    } else {
                        let inv = T::from_f64(1.0 / (1.0 - rate));
                        let data = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, v)| if keep(*seed, i as u64, *rate) { *v * inv } else { T::zero() })
                            .collect();
                        Tensor::from_vec(g.shape(), data)
                    };
                    add_grad(&mut before[*x], &dx);
                }
                Op::Reshape { x } => {
                    let dx = g.reshaped(before[*x].value.shape());
                    add_grad(&mut before[*x], &dx);
                }
                Op::Sum { x } => {
                    let dx = Tensor::full(before[*x].value.shape(), g.item());
                    add_grad(&mut before[*x], &dx);
                }
                Op::CausalAttention { qkv, batch, n_heads, probs, drop_rate, drop_seed } => {
                    let (qkv, batch, n_heads) = (*qkv, *batch, *n_heads);
                    let d = node.value.last_dim();
                    let t = node.value.rows() / batch;
                    let dh = d / n_heads;
                    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                    let dqkv = attention_backward(
                        before[qkv].value.data(),
                        probs.data(),
                        g.data(),
                        batch,
                        n_heads,
                        t,
                        d,
                        scale,
                        *drop_rate,
                        *drop_seed,
                    );
                    let dqkv = Tensor::from_vec(before[qkv].value.shape(), dqkv);
                    add_grad(&mut before[qkv], &dqkv);
                }
                Op::CrossEntropy { logits, targets, live } => {
                    let (logits, live) = (*logits, *live);
                    let v = before[logits].value.last_dim();
                    let gscale = g.item().as_f64() / live as f64;
                    let mut dl = vec![T::zero(); before[logits].value.len()];
                    for ((row, &tg), drow) in before[logits]
                        .value
                        .data()
                        .chunks(v)
                        .zip(targets)
                        .zip(dl.chunks_mut(v))
                    {
                        if tg == IGNORE_TARGET {
                            continue;
                        }
                        let mut p: Vec<T> = row.to_vec();
                        kernels::softmax_row(&mut p);
                        for (j, dv) in drow.iter_mut().enumerate() {
                            let indicator = if j == tg as usize { 1.0 } else { 0.0 };
                            *dv = T::from_f64((p[j].as_f64() - indicator) * gscale);
                        }
                    }
                    let dl = Tensor::from_vec(before[logits].value.shape(), dl);
                    add_grad(&mut before[logits], &dl);
                }
            }
        }
        Ok(())
    }
}

// ---- shared numeric helpers ------------------------------------------------

fn add_grad<T: Scalar>(node: &mut Node<T>, delta: &Tensor<T>) {
    match &mut node.grad {
        Some(gr) => {
            debug_assert_eq!(gr.shape(), delta.shape());
            for (g, d) in gr.data_mut().iter_mut().zip(delta.data()) {
                *g = *g + *d;
            }
        }
        None => node.grad = Some(delta.clone()),
    }
}

fn ew_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Tensor::from_vec(a.shape(), data)
}

fn ew_scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * c).collect();
    Tensor::from_vec(a.shape(), data)
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in row {
        max = max.max(v.as_f64());
    }
    let mut s = 0.0f64;
    for v in row {
        s += (v.as_f64() - max).exp();
    }
    max + s.ln()
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let u = GELU_C1 * (xf + GELU_C2 * xf * xf * xf);
    T::from_f64(0.5 * xf * (1.0 + u.tanh()))
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let u = GELU_C1 * (xf + GELU_C2 * xf * xf * xf);
    let th = u.tanh();
    let du = GELU_C1 * (1.0 + 3.0 * GELU_C2 * xf * xf);
    T::from_f64(0.5 * (1.0 + th) + 0.5 * xf * (1.0 - th * th) * du)
}

fn softmax_bwd_row<T: Scalar>(p: &[T], g: &[T], out: &mut [T]) {
    let mut dot = T::zero();
    for (pv, gv) in p.iter().zip(g) {
        dot = dot + *pv * *gv;
    }
    for ((o, pv), gv) in out.iter_mut().zip(p).zip(g) {
        *o = *pv * (*gv - dot);
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless dropout keep decision for element `idx` under `seed`.
pub(crate) fn keep(seed: u64, idx: u64, rate: f64) -> bool {
    let h = splitmix64(seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    ((h >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0) >= rate
}

/// Per-(batch, head) attention forward. Writes softmax probabilities into
/// `probs` (layout `[batch * heads, t * t]`) and returns the per-head context
/// buffers in (batch, head) order.
#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    qkv: &[T],
    probs: &mut [T],
    n_heads: usize,
    t: usize,
    d: usize,
    scale: T,
    drop_rate: f64,
    drop_seed: u64,
) -> Vec<Vec<T>> {
    let dh = d / n_heads;
    let work = |(bh, pchunk): (usize, &mut [T])| -> Vec<T> {
        let (b, h) = (bh / n_heads, bh % n_heads);
        let (q, k, v) = gather_heads(qkv, b, h, t, d, dh);
        // scores, scaled then causally masked
        kernels::matmul_bt_seq(&q, &k, pchunk, t, dh, t);
        let mask = T::from_f64(CAUSAL_MASK_OFFSET);
        for (i, row) in pchunk.chunks_mut(t).enumerate() {
            for val in row.iter_mut().take(i + 1) {
                *val = *val * scale;
            }
            for val in row.iter_mut().skip(i + 1) {
                *val = *val * scale + mask;
            }
            kernels::softmax_row(row);
        }
        // context = dropout(probs) . v
        let mut out = vec![T::zero(); t * dh];
        if drop_rate > 0.0 {
            let dropped = dropout_copy(pchunk, drop_rate, drop_seed, (bh * t * t) as u64);
            kernels::matmul_seq(&dropped, &v, &mut out, t, t, dh);
        } else {
            kernels::matmul_seq(pchunk, &v, &mut out, t, t, dh);
        }
        out
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        probs.par_chunks_mut(t * t).enumerate().map(work).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        probs.chunks_mut(t * t).enumerate().map(work).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    g: &[T],
    batch: usize,
    n_heads: usize,
    t: usize,
    d: usize,
    scale: T,
    drop_rate: f64,
    drop_seed: u64,
) -> Vec<T> {
    let dh = d / n_heads;
    let work = |(bh, pchunk): (usize, &[T])| -> (Vec<T>, Vec<T>, Vec<T>) {
        let (b, h) = (bh / n_heads, bh % n_heads);
        let (q, k, v) = gather_heads(qkv, b, h, t, d, dh);
        // incoming gradient slice for this head
        let mut gh = vec![T::zero(); t * dh];
        for tt in 0..t {
            let src = (b * t + tt) * d + h * dh;
            gh[tt * dh..(tt + 1) * dh].copy_from_slice(&g[src..src + dh]);
        }
        let dropped;
        let probs_used: &[T] = if drop_rate > 0.0 {
            dropped = dropout_copy(pchunk, drop_rate, drop_seed, (bh * t * t) as u64);
            &dropped
        } else {
            pchunk
        };
        // dv = probs_used^T . gh
        let mut dv = vec![T::zero(); t * dh];
        kernels::matmul_at_seq(probs_used, &gh, &mut dv, t, t, dh);
        // d(probs_used) = gh . v^T
        let mut dp = vec![T::zero(); t * t];
        kernels::matmul_bt_seq(&gh, &v, &mut dp, t, dh, t);
        // back through dropout
        if drop_rate > 0.0 {
            let inv = T::from_f64(1.0 / (1.0 - drop_rate));
            let base = (bh * t * t) as u64;
            for (i, val) in dp.iter_mut().enumerate() {
                *val = if keep(drop_seed, base + i as u64, drop_rate) { *val * inv } else { T::zero() };
            }
        }
        // back through softmax, then scale
        let mut ds = vec![T::zero(); t * t];
        for ((prow, gprow), dsrow) in pchunk.chunks(t).zip(dp.chunks(t)).zip(ds.chunks_mut(t)) {
            softmax_bwd_row(prow, gprow, dsrow);
        }
        for val in ds.iter_mut() {
            *val = *val * scale;
        }
        // dq = ds . k ; dk = ds^T . q
        let mut dq = vec![T::zero(); t * dh];
        kernels::matmul_seq(&ds, &k, &mut dq, t, t, dh);
        let mut dk = vec![T::zero(); t * dh];
        kernels::matmul_at_seq(&ds, &q, &mut dk, t, t, dh);
        (dq, dk, dv)
    };

    #[cfg(feature = "parallel")]
    let results: Vec<(Vec<T>, Vec<T>, Vec<T>)> = {
        use rayon::prelude::*;
        probs.par_chunks(t * t).enumerate().map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(Vec<T>, Vec<T>, Vec<T>)> =
        probs.chunks(t * t).enumerate().map(work).collect();

    let mut dqkv = vec![T::zero(); batch * t * 3 * d];
    for (bh, (dq, dk, dv)) in results.iter().enumerate() {
        let (b, h) = (bh / n_heads, bh % n_heads);
        for tt in 0..t {
            let row = (b * t + tt) * 3 * d;
            let col = h * dh;
            dqkv[row + col..row + col + dh].copy_from_slice(&dq[tt * dh..(tt + 1) * dh]);
            dqkv[row + d + col..row + d + col + dh].copy_from_slice(&dk[tt * dh..(tt + 1) * dh]);
            dqkv[row + 2 * d + col..row + 2 * d + col + dh]
                .copy_from_slice(&dv[tt * dh..(tt + 1) * dh]);
        }
    }
    dqkv
}

fn gather_heads<T: Scalar>(
    qkv: &[T],
    b: usize,
    h: usize,
    t: usize,
    d: usize,
    dh: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut q = vec![T::zero(); t * dh];
    let mut k = vec![T::zero(); t * dh];
    let mut v = vec![T::zero(); t * dh];
    for tt in 0..t {
        let row = (b * t + tt) * 3 * d;
        let col = h * dh;
        q[tt * dh..(tt + 1) * dh].copy_from_slice(&qkv[row + col..row + col + dh]);
        k[tt * dh..(tt + 1) * dh].copy_from_slice(&qkv[row + d + col..row + d + col + dh]);
        v[tt * dh..(tt + 1) * dh].copy_from_slice(&qkv[row + 2 * d + col..row + 2 * d + col + dh]);
    }
    (q, k, v)
}

fn dropout_copy<T: Scalar>(src: &[T], rate: f64, seed: u64, base_idx: u64) -> Vec<T> {
    let inv = T::from_f64(1.0 / (1.0 - rate));
    src.iter()
        .enumerate()
        .map(|(i, v)| if keep(seed, base_idx + i as u64, rate) { *v * inv } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_backward_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_leaf_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let prod = tape.matmul(a, eye);
        assert_eq!(tape.value(prod).data(), tape.value(a).data());

        let col = tape.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
        let prod2 = tape.matmul(a, col);
        assert_eq!(tape.value(prod2).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_grad_is_column_sum_broadcast() {
        // d/da sum(a.b) : each a[i][kk] gets sum_j b[kk][j]
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.1; 6]));
        let b = tape.leaf(Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let prod = tape.matmul(a, b);
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        let ga = tape.grad(a).unwrap();
        assert_eq!(ga.data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_shift_invariance_and_analytic_point() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 3.0f32.ln()]));
        let p = tape.softmax(x);
        let got = tape.value(p).data().to_vec();
        assert!((got[0] - 0.25).abs() < 1e-6);
        assert!((got[1] - 0.75).abs() < 1e-6);

        let xs = tape.leaf(Tensor::from_vec(&[1, 2], vec![7.0, 3.0f32.ln() + 7.0]));
        let ps = tape.softmax(xs);
        let shifted = tape.value(ps).data().to_vec();
        assert!((shifted[0] - got[0]).abs() < 1e-6);
        assert!((shifted[1] - got[1]).abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_input_gives_uniform_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 5], 2.5));
        let p = tape.softmax(x);
        for v in tape.value(p).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 4], 3.7));
        let gain = tape.leaf(Tensor::full(&[4], 1.0));
        let bias = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5);
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_mean_is_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 2.2, 0.9]));
        let gain = tape.leaf(Tensor::full(&[4], 1.0));
        let bias = tape.leaf(Tensor::full(&[4], 0.25));
        let y = tape.layer_norm(x, gain, bias, 1e-5);
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 4.0;
        assert!((mean - 0.25).abs() < 1e-5);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]));
        let y = tape.dropout(x, 0.0, 99);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.5, 7);
        let kept: Vec<f32> = tape.value(y).data().iter().copied().filter(|v| *v != 0.0).collect();
        assert!(kept.iter().all(|v| (*v - 2.0).abs() < 1e-6));
        // roughly half survive
        assert!(kept.len() > 350 && kept.len() < 650, "kept {}", kept.len());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[4, 1021]));
        let loss = tape.cross_entropy(logits, &[5, 17, 1000, 3]).unwrap();
        assert!((tape.value(loss).item() - (1021f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_all_ignored() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        let err = tape.cross_entropy(logits, &[IGNORE_TARGET, IGNORE_TARGET]);
        assert!(matches!(err, Err(TapeError::AllTargetsIgnored)));
    }

    #[test]
    fn cross_entropy_hand_computed_two_tokens() {
        // logits row [1, 2, 0], target 1; row2 ignored
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 0.0, 9.0, 9.0, 9.0]));
        let loss = tape.cross_entropy(logits, &[1, IGNORE_TARGET]).unwrap();
        let z = (1f64.exp() + 2f64.exp() + 1.0).ln();
        assert!((tape.value(loss).item() - (z - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.add(x, x);
        assert!(matches!(tape.backward(y), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::from_vec(&[2], vec![5.0, 6.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle_after_softmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[3, 3], vec![0.5; 9]));
        let m = tape.causal_mask(x, 1);
        let p = tape.softmax(m);
        let pv = tape.value(p).data();
        assert_eq!(pv[1], 0.0);
        assert_eq!(pv[2], 0.0);
        assert_eq!(pv[5], 0.0);
        assert!((pv[0] - 1.0).abs() < 1e-6);
        assert!((pv[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let out = tape.embedding(table, &[2, 0, 2]);
        assert_eq!(tape.value(out).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        // row 2 gathered twice -> grad 2, row 0 once, row 1 never
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
