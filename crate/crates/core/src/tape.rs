//! Reverse-mode differentiation over a recorded forward pass.
//!
//! Ops evaluate eagerly and append a node (value + operation record) to the
//! tape; `backward` replays the records in reverse, accumulating
//! vector-Jacobian products. Node inputs always precede the node itself, so
//! reverse index order is a valid topological order by construction. A node
//! feeding several consumers receives the sum of their contributions, which
//! is what skip connections rely on.
//!
//! One tape serves exactly one forward/backward pass and stays on a single
//! logical thread; parallelism lives inside individual ops (row-parallel
//! matmul) and never changes results.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{self, Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid op: {0}")]
    InvalidOp(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<E: Element> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Row-broadcast add: `[m,n] + [n]`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, E),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    },
    /// Per-feature normalization over all rows (train-mode batch norm).
    BatchNormCols {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
        mean: Vec<E>,
        var: Vec<E>,
    },
    /// Per-column affine with constant coefficients (inference batch norm).
    AffineCols {
        x: NodeId,
        scale: Vec<E>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<E>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ReverseRows(NodeId),
    /// Mean over each consecutive group of `group` rows.
    MeanPoolRows {
        x: NodeId,
        group: usize,
    },
    Transpose(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Batch-mean smoothed cross-entropy taking probabilities (not logits).
    CeFromProbs {
        probs: NodeId,
        labels: Vec<usize>,
        alpha: E,
    },
    /// Batch-mean binary cross-entropy on probabilities in (0,1).
    BceFromProbs {
        probs: NodeId,
        labels: Vec<u8>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id. Nodes the
/// loss does not depend on carry no entry.
#[derive(Debug)]
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of the given shape if none flowed to it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<E> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

const LOG_CLAMP: f64 = 1e-12;

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter value. Leaves receive gradients but have
    /// no inputs of their own.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let (av, vv) = (self.value(a), self.value(v));
        if av.rank() != 2 || vv.rank() != 1 || vv.shape()[0] != av.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            }
            .into());
        }
        let n = av.cols();
        let data: Vec<E> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vv.data()[i % n])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, v)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let c = E::from_f64(factor);
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(TapeError::InvalidOp(format!(
                "softmax_rows expects rank 2, got {:?}",
                x.shape()
            )));
        }
        let value = tensor::softmax(x, 1)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TapeError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if xv.rank() != 2 || gv.shape() != [n] || bv.shape() != [n] {
            return Err(TapeError::InvalidOp(format!(
                "layer_norm_rows: x {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let eps = E::from_f64(eps);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            let (mean, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNormRows { x, gamma, beta, eps }))
    }

    /// Train-mode batch norm: normalize each column over all rows to mean 0 /
    /// variance 1 (population), then `gamma * xhat + beta`. Returns the node
    /// plus the batch statistics so the caller can update running stats.
    pub fn batch_norm_cols(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<E>, Vec<E>), TapeError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if xv.rank() != 2 || gv.shape() != [n] || bv.shape() != [n] {
            return Err(TapeError::InvalidOp(format!(
                "batch_norm_cols: x {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let m = xv.rows();
        let inv_m = E::from_f64(1.0 / m as f64);
        let mut mean = vec![E::zero(); n];
        for row in xv.data().chunks_exact(n) {
            for (s, &v) in mean.iter_mut().zip(row) {
                *s = *s + v;
            }
        }
        for s in mean.iter_mut() {
            *s = *s * inv_m;
        }
        let mut var = vec![E::zero(); n];
        for row in xv.data().chunks_exact(n) {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        for s in var.iter_mut() {
            *s = *s * inv_m;
        }
        let epse = E::from_f64(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| (v + epse).sqrt().recip()).collect();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean[j]) * inv_std[j] * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let id = self.push(
            value,
            Op::BatchNormCols {
                x,
                gamma,
                beta,
                eps: epse,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        Ok((id, mean, var))
    }

    /// `out[:,j] = x[:,j] * scale[j] + shift[j]` with constant coefficients.
    pub fn affine_cols(
        &mut self,
        x: NodeId,
        scale: Vec<E>,
        shift: Vec<E>,
    ) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        let n = xv.cols();
        if xv.rank() != 2 || scale.len() != n || shift.len() != n {
            return Err(TapeError::InvalidOp(format!(
                "affine_cols: x {:?}, scale {}, shift {}",
                xv.shape(),
                scale.len(),
                shift.len()
            )));
        }
        let data: Vec<E> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i % n] + shift[i % n])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AffineCols { x, scale }))
    }

    /// Inverted dropout: kept elements are scaled by `1/(1-rate)`.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TapeError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TapeError::InvalidOp(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = E::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<E> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.rows() || len == 0 {
            return Err(TapeError::InvalidOp(format!(
                "slice_rows {start}+{len} of {:?}",
                xv.shape()
            )));
        }
        let n = xv.cols();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        Ok(self.push(value, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.cols() || len == 0 {
            return Err(TapeError::InvalidOp(format!(
                "slice_cols {start}+{len} of {:?}",
                xv.shape()
            )));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::InvalidOp("concat_rows of nothing".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != n {
                return Err(TapeError::InvalidOp(format!(
                    "concat_rows: part {:?} vs {n} cols",
                    v.shape()
                )));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in &parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(value, Op::ConcatRows(parts)))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::InvalidOp("concat_cols of nothing".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in &parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != m {
                return Err(TapeError::InvalidOp(format!(
                    "concat_cols: part {:?} vs {m} rows",
                    v.shape()
                )));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in &parts {
                let v = self.value(p);
                let w = v.cols();
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, cols], data)?;
        Ok(self.push(value, Op::ConcatCols(parts)))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.rank() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(TapeError::InvalidOp(format!(
                "gather_rows: {} indices into {:?}",
                idx.len(),
                xv.shape()
            )));
        }
        let n = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(value, Op::GatherRows { x, idx }))
    }

    pub fn reverse_rows(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TapeError::InvalidOp("reverse_rows expects rank 2".into()));
        }
        let n = xv.cols();
        let mut data = Vec::with_capacity(xv.numel());
        for i in (0..xv.rows()).rev() {
            data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ReverseRows(x)))
    }

    pub fn mean_pool_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.rank() != 2 || group == 0 || xv.rows() % group != 0 {
            return Err(TapeError::InvalidOp(format!(
                "mean_pool_rows: group {group} of {:?}",
                xv.shape()
            )));
        }
        let n = xv.cols();
        let groups = xv.rows() / group;
        let inv = E::from_f64(1.0 / group as f64);
        let mut data = vec![E::zero(); groups * n];
        for (i, row) in xv.data().chunks_exact(n).enumerate() {
            let g = i / group;
            for (j, &v) in row.iter().enumerate() {
                data[g * n + j] = data[g * n + j] + v * inv;
            }
        }
        let value = Tensor::new(vec![groups, n], data)?;
        Ok(self.push(value, Op::MeanPoolRows { x, group }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TapeError::InvalidOp("transpose expects rank 2".into()));
        }
        let value = tensor::transpose(xv);
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = E::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let mut s = E::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        let value = Tensor::scalar(s / E::from_f64(n as f64));
        self.push(value, Op::MeanAll(x))
    }

    /// Batch-mean cross-entropy against label-smoothed one-hot targets.
    /// `probs` rows must already be probabilities; the log is clamped at
    /// 1e-12.
    pub fn cross_entropy_probs(
        &mut self,
        probs: NodeId,
        labels: &[usize],
        alpha: f64,
    ) -> Result<NodeId, TapeError> {
        let pv = self.value(probs);
        if pv.rank() != 2 || pv.rows() != labels.len() {
            return Err(TapeError::InvalidOp(format!(
                "cross_entropy_probs: probs {:?} vs {} labels",
                pv.shape(),
                labels.len()
            )));
        }
        let k = pv.cols();
        for &label in labels {
            if label >= k {
                return Err(TapeError::LabelOutOfRange { label, classes: k });
            }
        }
        let clamp = E::from_f64(LOG_CLAMP);
        let off = E::from_f64(alpha / k as f64);
        let on = E::from_f64(1.0 - alpha) + off;
        let mut total = E::zero();
        for (row, &label) in pv.data().chunks_exact(k).zip(labels) {
            for (j, &p) in row.iter().enumerate() {
                let t = if j == label { on } else { off };
                total = total - t * p.max(clamp).ln();
            }
        }
        let value = Tensor::scalar(total / E::from_f64(labels.len() as f64));
        Ok(self.push(
            value,
            Op::CeFromProbs {
                probs,
                labels: labels.to_vec(),
                alpha: E::from_f64(alpha),
            },
        ))
    }

    /// Batch-mean binary cross-entropy; probabilities are clamped to
    /// `[1e-12, 1 - 1e-12]` before the log.
    pub fn binary_cross_entropy_probs(
        &mut self,
        probs: NodeId,
        labels: &[u8],
    ) -> Result<NodeId, TapeError> {
        let pv = self.value(probs);
        if pv.numel() != labels.len() {
            return Err(TapeError::InvalidOp(format!(
                "binary_cross_entropy_probs: probs {:?} vs {} labels",
                pv.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(TapeError::LabelOutOfRange {
                label: bad as usize,
                classes: 2,
            });
        }
        let lo = E::from_f64(LOG_CLAMP);
        let hi = E::one() - lo;
        let mut total = E::zero();
        for (&p, &y) in pv.data().iter().zip(labels) {
            let p = p.max(lo).min(hi);
            total = total
                - if y == 1 {
                    p.ln()
                } else {
                    (E::one() - p).ln()
                };
        }
        let value = Tensor::scalar(total / E::from_f64(labels.len() as f64));
        Ok(self.push(
            value,
            Op::BceFromProbs {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss. The gradient of the loss with
    /// respect to itself is 1; every ancestor receives the sum of the
    /// contributions of its consumers.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>, TapeError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TapeError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape().to_vec(), E::one()));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let bt = tensor::transpose(self.value(*b));
                let da = tensor::matmul(g, &bt).expect("matmul vjp");
                accumulate(grads, *a, da);
                let at = tensor::transpose(self.value(*a));
                let db = tensor::matmul(&at, g).expect("matmul vjp");
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y).expect("mul vjp");
                accumulate(grads, *a, da);
                let db = g.zip_map(self.value(*a), |x, y| x * y).expect("mul vjp");
                accumulate(grads, *b, db);
            }
            Op::AddRow(a, v) => {
                accumulate(grads, *a, g.clone());
                let n = self.value(*v).numel();
                let mut dv = vec![E::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (s, &x) in dv.iter_mut().zip(row) {
                        *s = *s + x;
                    }
                }
                accumulate(grads, *v, Tensor::new(vec![n], dv).unwrap());
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = g
                    .zip_map(y, |gi, yi| gi * yi * (E::one() - yi))
                    .expect("sigmoid vjp");
                accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let da = g
                    .zip_map(y, |gi, yi| gi * (E::one() - yi * yi))
                    .expect("tanh vjp");
                accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g
                    .zip_map(self.value(*a), |gi, xi| gi * gelu_derivative(xi))
                    .expect("gelu vjp");
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks_exact(n).zip(y.data().chunks_exact(n)) {
                    let mut dot = E::zero();
                    for (&gi, &yi) in gr.iter().zip(yr) {
                        dot = dot + gi * yi;
                    }
                    for (&gi, &yi) in gr.iter().zip(yr) {
                        dx.push(yi * (gi - dot));
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = xv.cols();
                let inv_n = E::from_f64(1.0 / n as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dgamma = vec![E::zero(); n];
                let mut dbeta = vec![E::zero(); n];
                for (xr, gr) in xv.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                    let (mean, var) = mean_var(xr);
                    let inv_std = (var + *eps).sqrt().recip();
                    let xhat: Vec<E> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..n {
                        dbeta[j] = dbeta[j] + gr[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        let dxhat = gr[j] * gv.data()[j];
                        m1 = m1 + dxhat;
                        m2 = m2 + dxhat * xhat[j];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    for j in 0..n {
                        let dxhat = gr[j] * gv.data()[j];
                        dx.push((dxhat - m1 - xhat[j] * m2) * inv_std);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                accumulate(grads, *gamma, Tensor::new(vec![n], dgamma).unwrap());
                accumulate(grads, *beta, Tensor::new(vec![n], dbeta).unwrap());
            }
            Op::BatchNormCols {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (m, n) = (xv.rows(), xv.cols());
                let inv_m = E::from_f64(1.0 / m as f64);
                let inv_std: Vec<E> = var.iter().map(|&v| (v + *eps).sqrt().recip()).collect();
                let mut dgamma = vec![E::zero(); n];
                let mut dbeta = vec![E::zero(); n];
                let mut m1 = vec![E::zero(); n];
                let mut m2 = vec![E::zero(); n];
                for (xr, gr) in xv.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                    for j in 0..n {
                        let xhat = (xr[j] - mean[j]) * inv_std[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        let dxhat = gr[j] * gv.data()[j];
                        m1[j] = m1[j] + dxhat;
                        m2[j] = m2[j] + dxhat * xhat;
                    }
                }
                for j in 0..n {
                    m1[j] = m1[j] * inv_m;
                    m2[j] = m2[j] * inv_m;
                }
                let mut dx = Vec::with_capacity(xv.numel());
                for (xr, gr) in xv.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                    for j in 0..n {
                        let xhat = (xr[j] - mean[j]) * inv_std[j];
                        let dxhat = gr[j] * gv.data()[j];
                        dx.push((dxhat - m1[j] - xhat * m2[j]) * inv_std[j]);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                accumulate(grads, *gamma, Tensor::new(vec![n], dgamma).unwrap());
                accumulate(grads, *beta, Tensor::new(vec![n], dbeta).unwrap());
            }
            Op::AffineCols { x, scale } => {
                let n = scale.len();
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * scale[i % n])
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<E> = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..m {
                    dx.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[offset * n..(offset + rows) * n].to_vec();
                    accumulate(grads, p, Tensor::new(vec![rows, n], slice).unwrap());
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(vec![m, w], dp).unwrap());
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * n..(i + 1) * n];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ReverseRows(x) => {
                let n = node.value.cols();
                let rows = node.value.rows();
                let mut dx = Vec::with_capacity(g.numel());
                for i in (0..rows).rev() {
                    dx.extend_from_slice(&g.data()[i * n..(i + 1) * n]);
                }
                accumulate(grads, *x, Tensor::new(vec![rows, n], dx).unwrap());
            }
            Op::MeanPoolRows { x, group } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let inv = E::from_f64(1.0 / *group as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for i in 0..xv.rows() {
                    let gr = i / group;
                    for j in 0..n {
                        dx.push(g.data()[gr * n + j] * inv);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Transpose(x) => {
                accumulate(grads, *x, tensor::transpose(g));
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::filled(xv.shape().to_vec(), s));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let s = g.data()[0] / E::from_f64(xv.numel() as f64);
                accumulate(grads, *x, Tensor::filled(xv.shape().to_vec(), s));
            }
            Op::CeFromProbs {
                probs,
                labels,
                alpha,
            } => {
                let pv = self.value(*probs);
                let k = pv.cols();
                let clamp = E::from_f64(LOG_CLAMP);
                let off = *alpha / E::from_f64(k as f64);
                let on = E::one() - *alpha + off;
                let scale = g.data()[0] / E::from_f64(labels.len() as f64);
                let mut dp = Vec::with_capacity(pv.numel());
                for (row, &label) in pv.data().chunks_exact(k).zip(labels) {
                    for (j, &p) in row.iter().enumerate() {
                        let t = if j == label { on } else { off };
                        if p > clamp {
                            dp.push(-(t / p) * scale);
                        } else {
                            dp.push(E::zero());
                        }
                    }
                }
                accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), dp).unwrap());
            }
            Op::BceFromProbs { probs, labels } => {
                let pv = self.value(*probs);
                let lo = E::from_f64(LOG_CLAMP);
                let hi = E::one() - lo;
                let scale = g.data()[0] / E::from_f64(labels.len() as f64);
                let dp: Vec<E> = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= lo || p >= hi {
                            E::zero()
                        } else if y == 1 {
                            -(E::one() / p) * scale
                        } else {
                            (E::one() / (E::one() - p)) * scale
                        }
                    })
                    .collect();
                accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), dp).unwrap());
            }
        }
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
    match &mut grads[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape(), "gradient shape drift");
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn mean_var<E: Element>(row: &[E]) -> (E, E) {
    let inv_n = E::from_f64(1.0 / row.len() as f64);
    let mut mean = E::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean * inv_n;
    let mut var = E::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var * inv_n)
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(GELU_SQRT_2_OVER_PI);
    let k = E::from_f64(GELU_CUBIC);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(GELU_SQRT_2_OVER_PI);
    let k = E::from_f64(GELU_CUBIC);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        // d(x*y)/dx at (3, 5) is 5.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let p = tape.mul(x, y).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn unrelated_node_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::scalar(9.0));
        let loss = tape.mul(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        let y = tape.add(x, x).unwrap();
        assert!(matches!(
            tape.backward(y).unwrap_err(),
            TapeError::NonScalarLoss(_)
        ));
    }

    #[test]
    fn fanout_accumulates() {
        // loss = 2x + 3x => dx = 5.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let bottom = tape.slice_rows(x, 1, 1).unwrap();
        let swapped = tape.concat_rows(vec![bottom, top]).unwrap();
        let doubled = tape.scale(swapped, 2.0);
        let loss = tape.sum_all(doubled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]));
        let gathered = tape.gather_rows(x, vec![0, 0, 1]).unwrap();
        let loss = tape.sum_all(gathered);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 5.0, 5.0]]));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_uniform_case() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::filled(vec![2, 8], 0.125));
        let loss = tape.cross_entropy_probs(p, &[3, 5], 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::filled(vec![1, 4], 0.25));
        assert!(matches!(
            tape.cross_entropy_probs(p, &[4], 0.0).unwrap_err(),
            TapeError::LabelOutOfRange { label: 4, classes: 4 }
        ));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(vec![2, 2], 1.5));
        let mut rng = crate::rng::RngState::new(1).stream();
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn mean_pool_rows_averages_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![10.0, 20.0],
            vec![30.0, 40.0],
        ]));
        let y = tape.mean_pool_rows(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 20.0, 30.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.5));
    }
}
