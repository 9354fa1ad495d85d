//! Tape-based reverse-mode differentiation over dense rank-2 tensors.
//!
//! Forward ops execute eagerly and append a node to the tape; `backward`
//! replays the tape in reverse and accumulates vector-Jacobian products.
//! A tape also owns a multiply-accumulate counter used by the cost
//! accounting layer; matrix products charge `m*k*n` to the active scope.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on a tape. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cost-accounting buckets for multiply-accumulate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MacCategory {
    Projections,
    AttentionScores,
    AttentionValues,
    Mixer,
    Ffn,
    Classifier,
    Other,
}

impl MacCategory {
    pub const ALL: [MacCategory; 7] = [
        MacCategory::Projections,
        MacCategory::AttentionScores,
        MacCategory::AttentionValues,
        MacCategory::Mixer,
        MacCategory::Ffn,
        MacCategory::Classifier,
        MacCategory::Other,
    ];

    fn idx(self) -> usize {
        match self {
            MacCategory::Projections => 0,
            MacCategory::AttentionScores => 1,
            MacCategory::AttentionValues => 2,
            MacCategory::Mixer => 3,
            MacCategory::Ffn => 4,
            MacCategory::Classifier => 5,
            MacCategory::Other => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MacCategory::Projections => "projections",
            MacCategory::AttentionScores => "attention-scores",
            MacCategory::AttentionValues => "attention-values",
            MacCategory::Mixer => "mixer",
            MacCategory::Ffn => "ffn",
            MacCategory::Classifier => "classifier",
            MacCategory::Other => "other",
        }
    }
}

/// Where generic matrix products book their multiplies.
///
/// Attention routines mute the generic hook and charge their documented
/// cost rates explicitly, so window products are never double-booked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacScope {
    Category(MacCategory),
    Muted,
}

/// Per-tape multiply-accumulate counter, attributed by category.
#[derive(Debug, Clone)]
pub struct MacCounter {
    enabled: bool,
    counts: [u64; 7],
}

impl Default for MacCounter {
    fn default() -> Self {
        MacCounter {
            enabled: true,
            counts: [0; 7],
        }
    }
}

impl MacCounter {
    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn get(&self, cat: MacCategory) -> u64 {
        self.counts[cat.idx()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Attention scores plus attention values.
    pub fn attention_total(&self) -> u64 {
        self.get(MacCategory::AttentionScores) + self.get(MacCategory::AttentionValues)
    }
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRowBroadcast { a: NodeId, bias: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: S },
    Transpose { a: NodeId },
    SoftmaxRows { a: NodeId },
    Gelu { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: S },
    AvgPoolTime { a: NodeId, p: usize },
    UpsampleNearestTime { a: NodeId, s: usize },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    MeanRows { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    CrossEntropy { logits: NodeId, label: usize },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    param: bool,
}

/// Gradients for the parameter leaves of one backward pass, indexed by the
/// node ids returned at registration time.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a parameter leaf; zero-filled if no gradient flowed to it.
    /// Returns `None` for nodes that are not parameter leaves.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    counter: MacCounter,
    scope: MacScope,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            counter: MacCounter::default(),
            scope: MacScope::Category(MacCategory::Other),
        }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, param: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, param });
        id
    }

    /// Registers a constant input (no gradient retained).
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Registers a trainable parameter (gradient retained by `backward`).
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ids of every row-softmax node on the tape, in execution order.
    /// Attention probability matrices are exactly these nodes.
    pub fn softmax_node_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::SoftmaxRows { .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    // ── MAC accounting ──────────────────────────────────────────────

    pub fn macs(&self) -> &MacCounter {
        &self.counter
    }

    pub fn set_counting(&mut self, enabled: bool) {
        self.counter.enabled = enabled;
    }

    /// Sets the booking scope for generic matrix products; returns the
    /// previous scope so callers can restore it.
    pub fn set_scope(&mut self, scope: MacScope) -> MacScope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn charge(&mut self, cat: MacCategory, macs: u64) {
        if self.counter.enabled {
            self.counter.counts[cat.idx()] += macs;
        }
    }

    fn charge_scoped(&mut self, macs: u64) {
        match self.scope {
            MacScope::Category(cat) => self.charge(cat, macs),
            MacScope::Muted => {}
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Matrix product `A[m,k] x B[k,n] -> [m,n]`; books `m*k*n` MACs.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).shape();
        let (kb, n) = self.value(b).shape();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs_rows: m,
                lhs_cols: ka,
                rhs_rows: kb,
                rhs_cols: n,
            });
        }
        let out = matmul_raw(self.value(a), self.value(b));
        self.charge_scoped((m * ka * n) as u64);
        Ok(self.push(Op::Matmul { a, b }, out, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        if (ra, ca) != (rb, cb) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs_rows: ra,
                lhs_cols: ca,
                rhs_rows: rb,
                rhs_cols: cb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ra, ca, data)?;
        Ok(self.push(Op::Add { a, b }, out, false))
    }

    /// `A[t,n] + bias[1,n]`, bias added to every row.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(bias).shape();
        if rb != 1 || cb != ca {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs_rows: ra,
                lhs_cols: ca,
                rhs_rows: rb,
                rhs_cols: cb,
            });
        }
        let mut out = self.value(a).clone();
        let bias_row: Vec<S> = self.value(bias).data().to_vec();
        for r in 0..ra {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *x += *b;
            }
        }
        Ok(self.push(Op::AddRowBroadcast { a, bias }, out, false))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        if (ra, ca) != (rb, cb) {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                lhs_rows: ra,
                lhs_cols: ca,
                rhs_rows: rb,
                rhs_cols: cb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ra, ca, data)?;
        Ok(self.push(Op::MulElem { a, b }, out, false))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let out = self.value(a).map(|x| x * factor);
        self.push(Op::Scale { a, factor }, out, false)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transposed();
        self.push(Op::Transpose { a }, out, false)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let input = self.value(a);
        let (rows, cols) = input.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            softmax_row(input.row(r), out.row_mut(r));
        }
        self.push(Op::SoftmaxRows { a }, out, false)
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF in erf form.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu { a }, out, false)
    }

    /// Row-wise layer normalization with population variance and `eps`
    /// inside the square root, then `gamma` scale and `beta` shift.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (gr, gc) = self.value(id).shape();
            if gr != 1 || gc != cols {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: gr,
                    rhs_cols: gc,
                });
            }
        }
        if eps <= S::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let input = self.value(a);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row(r);
            let (mean, var) = row_mean_var(row);
            let inv_std = S::one() / (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_std;
                out.set(r, c, g[c] * xhat + b[c]);
            }
        }
        Ok(self.push(Op::LayerNorm { a, gamma, beta, eps }, out, false))
    }

    /// Averages each group of `p` adjacent rows; requires `p` divides the
    /// row count.
    pub fn avg_pool_time(&mut self, a: NodeId, p: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if p == 0 {
            return Err(Error::config("avg_pool_time window must be at least 1"));
        }
        if rows % p != 0 {
            return Err(Error::NotDivisible {
                what: "avg_pool_time rows",
                len: rows,
                divisor: p,
            });
        }
        let input = self.value(a);
        let out_rows = rows / p;
        let inv_p = S::one() / S::from_usize(p).unwrap();
        let mut out = Tensor::zeros(out_rows, cols);
        for j in 0..out_rows {
            for c in 0..cols {
                let mut acc = S::zero();
                for i in 0..p {
                    acc += input.get(j * p + i, c);
                }
                out.set(j, c, acc * inv_p);
            }
        }
        Ok(self.push(Op::AvgPoolTime { a, p }, out, false))
    }

    /// Repeats each row `s` consecutive times.
    pub fn upsample_nearest_time(&mut self, a: NodeId, s: usize) -> Result<NodeId> {
        if s == 0 {
            return Err(Error::config("upsample_nearest_time factor must be at least 1"));
        }
        let (rows, cols) = self.value(a).shape();
        let input = self.value(a);
        let mut out = Tensor::zeros(rows * s, cols);
        for r in 0..rows {
            for rep in 0..s {
                out.row_mut(r * s + rep).copy_from_slice(input.row(r));
            }
        }
        Ok(self.push(Op::UpsampleNearestTime { a, s }, out, false))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if len == 0 || start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {}) out of bounds for {rows} rows",
                start + len
            )));
        }
        let input = self.value(a);
        let mut out = Tensor::zeros(len, cols);
        for r in 0..len {
            out.row_mut(r).copy_from_slice(input.row(start + r));
        }
        Ok(self.push(Op::SliceRows { a, start }, out, false))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if len == 0 || start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of bounds for {cols} cols",
                start + len
            )));
        }
        let input = self.value(a);
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&input.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { a, start }, out, false))
    }

    /// Stacks parts vertically, in order.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).shape();
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: r,
                    rhs_cols: c,
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, out, false))
    }

    /// Stacks parts side by side, in order.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).shape();
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: r,
                    rhs_cols: c,
                });
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let part = self.value(p).clone();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + part.cols()].copy_from_slice(part.row(r));
            }
            offset += part.cols();
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, out, false))
    }

    /// Column-wise mean over rows: `[t,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.value(a).shape();
        let input = self.value(a);
        let inv = S::one() / S::from_usize(rows).unwrap();
        let mut out = Tensor::zeros(1, cols);
        for c in 0..cols {
            let mut acc = S::zero();
            for r in 0..rows {
                acc += input.get(r, c);
            }
            out.set(0, c, acc * inv);
        }
        self.push(Op::MeanRows { a }, out, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: S = self.value(a).data().iter().copied().sum();
        let out = Tensor::new(1, 1, vec![s]).expect("1x1");
        self.push(Op::SumAll { a }, out, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = S::from_usize(self.value(a).len()).unwrap();
        let s: S = self.value(a).data().iter().copied().sum();
        let out = Tensor::new(1, 1, vec![s / n]).expect("1x1");
        self.push(Op::MeanAll { a }, out, false)
    }

    /// Negative log-softmax of `logits[1,C]` at `label`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(logits).shape();
        if rows != 1 {
            return Err(Error::contract(format!(
                "cross_entropy expects 1xC logits, got {rows}x{cols}"
            )));
        }
        if label >= cols {
            return Err(Error::contract(format!(
                "cross_entropy label {label} out of range for {cols} classes"
            )));
        }
        let row = self.value(logits).row(0);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum_exp: S = row.iter().map(|&z| (z - max).exp()).sum();
        let loss = max + sum_exp.ln() - row[label];
        let out = Tensor::new(1, 1, vec![loss])?;
        Ok(self.push(Op::CrossEntropy { logits, label }, out, false))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar (1x1) loss node. Returns gradients
    /// for every parameter leaf; non-parameter leaves are skipped. Pure: a
    /// second call on the same tape yields identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let (lr, lc) = self.value(loss).shape();
        if (lr, lc) != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got {lr}x{lc}"
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(1, 1, vec![S::one()])?);

        for id in (0..=loss.0).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    // Retained below if this leaf is a parameter.
                    grads[id] = Some(grad_out);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let bt = self.value(*b).transposed();
                    let at = self.value(*a).transposed();
                    accumulate(&mut grads, *a, matmul_raw(&grad_out, &bt));
                    accumulate(&mut grads, *b, matmul_raw(&at, &grad_out));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, grad_out.clone());
                    accumulate(&mut grads, *b, grad_out);
                }
                Op::AddRowBroadcast { a, bias } => {
                    let (rows, cols) = grad_out.shape();
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = db.get(0, c) + grad_out.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, grad_out);
                    accumulate(&mut grads, *bias, db);
                }
                Op::MulElem { a, b } => {
                    let da = zip_mul(&grad_out, self.value(*b));
                    let db = zip_mul(&grad_out, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, factor } => {
                    accumulate(&mut grads, *a, grad_out.map(|g| g * *factor));
                }
                Op::Transpose { a } => {
                    accumulate(&mut grads, *a, grad_out.transposed());
                }
                Op::SoftmaxRows { a } => {
                    // dx = y * (dy - <dy, y>) per row, with y the forward output.
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dot: S = (0..cols).map(|c| grad_out.get(r, c) * y.get(r, c)).sum();
                        for c in 0..cols {
                            dx.set(r, c, y.get(r, c) * (grad_out.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    let dx = Tensor::new(
                        x.rows(),
                        x.cols(),
                        x.data()
                            .iter()
                            .zip(grad_out.data())
                            .map(|(&xi, &gi)| gi * gelu_grad_scalar(xi))
                            .collect(),
                    )
                    .expect("shape preserved");
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let x = self.value(*a);
                    let g = self.value(*gamma);
                    let (rows, cols) = x.shape();
                    let n = S::from_usize(cols).unwrap();
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let row = x.row(r);
                        let (mean, var) = row_mean_var(row);
                        let inv_std = S::one() / (var + *eps).sqrt();
                        // gh = dy * gamma; dx = inv_std*(gh - mean(gh) - xhat*mean(gh*xhat))
                        let mut mean_gh = S::zero();
                        let mut mean_gh_xhat = S::zero();
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv_std;
                            let gh = grad_out.get(r, c) * g.get(0, c);
                            mean_gh += gh;
                            mean_gh_xhat += gh * xhat;
                            dgamma.set(0, c, dgamma.get(0, c) + grad_out.get(r, c) * xhat);
                            dbeta.set(0, c, dbeta.get(0, c) + grad_out.get(r, c));
                        }
                        mean_gh /= n;
                        mean_gh_xhat /= n;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv_std;
                            let gh = grad_out.get(r, c) * g.get(0, c);
                            dx.set(r, c, inv_std * (gh - mean_gh - xhat * mean_gh_xhat));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::AvgPoolTime { a, p } => {
                    let (in_rows, cols) = self.value(*a).shape();
                    let inv_p = S::one() / S::from_usize(*p).unwrap();
                    let mut dx = Tensor::zeros(in_rows, cols);
                    for r in 0..in_rows {
                        for c in 0..cols {
                            dx.set(r, c, grad_out.get(r / p, c) * inv_p);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::UpsampleNearestTime { a, s } => {
                    let (in_rows, cols) = self.value(*a).shape();
                    let mut dx = Tensor::zeros(in_rows, cols);
                    for r in 0..in_rows {
                        for c in 0..cols {
                            let mut acc = S::zero();
                            for rep in 0..*s {
                                acc += grad_out.get(r * s + rep, c);
                            }
                            dx.set(r, c, acc);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceRows { a, start } => {
                    let (in_rows, cols) = self.value(*a).shape();
                    let mut dx = Tensor::zeros(in_rows, cols);
                    for r in 0..grad_out.rows() {
                        dx.row_mut(start + r).copy_from_slice(grad_out.row(r));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceCols { a, start } => {
                    let (in_rows, in_cols) = self.value(*a).shape();
                    let mut dx = Tensor::zeros(in_rows, in_cols);
                    for r in 0..grad_out.rows() {
                        dx.row_mut(r)[*start..start + grad_out.cols()]
                            .copy_from_slice(grad_out.row(r));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        let mut dp = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            dp.row_mut(r).copy_from_slice(grad_out.row(offset + r));
                        }
                        accumulate(&mut grads, p, dp);
                        offset += pr;
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        let mut dp = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            dp.row_mut(r)
                                .copy_from_slice(&grad_out.row(r)[offset..offset + pc]);
                        }
                        accumulate(&mut grads, p, dp);
                        offset += pc;
                    }
                }
                Op::MeanRows { a } => {
                    let (in_rows, cols) = self.value(*a).shape();
                    let inv = S::one() / S::from_usize(in_rows).unwrap();
                    let mut dx = Tensor::zeros(in_rows, cols);
                    for r in 0..in_rows {
                        for c in 0..cols {
                            dx.set(r, c, grad_out.get(0, c) * inv);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SumAll { a } => {
                    let g = grad_out.get(0, 0);
                    let (in_rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(in_rows, cols, g));
                }
                Op::MeanAll { a } => {
                    let (in_rows, cols) = self.value(*a).shape();
                    let g = grad_out.get(0, 0) / S::from_usize(in_rows * cols).unwrap();
                    accumulate(&mut grads, *a, Tensor::filled(in_rows, cols, g));
                }
                Op::CrossEntropy { logits, label } => {
                    // d(loss)/d(logits) = softmax(logits) - one_hot(label).
                    let z = self.value(*logits);
                    let mut probs = Tensor::zeros(1, z.cols());
                    softmax_row(z.row(0), probs.row_mut(0));
                    let g = grad_out.get(0, 0);
                    let mut dz = Tensor::zeros(1, z.cols());
                    for c in 0..z.cols() {
                        let one_hot = if c == *label { S::one() } else { S::zero() };
                        dz.set(0, c, g * (probs.get(0, c) - one_hot));
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }

        // Retain parameter-leaf gradients only.
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = node.param && matches!(node.op, Op::Leaf);
            if !keep {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn zip_mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
    .expect("shape preserved")
}

fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, _) = a.shape();
    let (_, n) = b.shape();
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = b.row(p);
            let out_row = out.row_mut(i);
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
    out
}

fn softmax_row<S: Scalar>(input: &[S], output: &mut [S]) {
    let max = input.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in output.iter_mut().zip(input) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = S::one() / sum;
    for o in output.iter_mut() {
        *o *= inv;
    }
}

fn row_mean_var<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    (mean, var)
}

/// `x * Phi(x)` with `Phi` the standard normal CDF.
fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let inv_sqrt2 = S::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (S::one() + (x * inv_sqrt2).erf())
}

/// `Phi(x) + x * phi(x)`.
fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let inv_sqrt2 = S::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = S::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (S::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}
