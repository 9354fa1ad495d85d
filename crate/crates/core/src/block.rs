//! Encoder blocks: the multi-scale windowed-attention block (projection,
//! pooling pyramid, per-scale window attention, scale mixer, residual +
//! norm + FFN) and the full-attention baseline block that shares the same
//! parameter set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{MacCategory, MacScope, NodeId, Tape};
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameters of one encoder block. Both block variants use the identical
/// set, so weights can be transplanted between them.
#[derive(Debug, Clone)]
pub struct BlockParams<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

/// Glorot-uniform weight: entries in `[-lim, lim]` with
/// `lim = sqrt(6 / (fan_in + fan_out))`. Draws in f64, then narrows.
pub(crate) fn glorot_uniform<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<S> {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| S::from_f64_lossy(rng.random_range(-lim..lim)))
            .collect(),
    )
    .expect("valid shape")
}

impl<S: Scalar> BlockParams<S> {
    /// Glorot weights, zero biases, unit gamma, zero beta.
    pub fn init(f: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        BlockParams {
            w_q: glorot_uniform(rng, f, f),
            w_k: glorot_uniform(rng, f, f),
            w_v: glorot_uniform(rng, f, f),
            w_o: glorot_uniform(rng, f, f),
            ffn_w1: glorot_uniform(rng, f, d_ff),
            ffn_b1: Tensor::zeros(1, d_ff),
            ffn_w2: glorot_uniform(rng, d_ff, f),
            ffn_b2: Tensor::zeros(1, f),
            ln1_gamma: Tensor::filled(1, f, S::one()),
            ln1_beta: Tensor::zeros(1, f),
            ln2_gamma: Tensor::filled(1, f, S::one()),
            ln2_beta: Tensor::zeros(1, f),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<S>); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// Tape node ids for one registered block, in `BlockParams::tensors` order.
#[derive(Debug, Clone, Copy)]
pub struct BlockParamIds {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

impl BlockParamIds {
    fn register<S: Scalar>(tape: &mut Tape<S>, p: &BlockParams<S>, trainable: bool) -> Self {
        let mut reg = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        BlockParamIds {
            w_q: reg(&p.w_q),
            w_k: reg(&p.w_k),
            w_v: reg(&p.w_v),
            w_o: reg(&p.w_o),
            ffn_w1: reg(&p.ffn_w1),
            ffn_b1: reg(&p.ffn_b1),
            ffn_w2: reg(&p.ffn_w2),
            ffn_b2: reg(&p.ffn_b2),
            ln1_gamma: reg(&p.ln1_gamma),
            ln1_beta: reg(&p.ln1_beta),
            ln2_gamma: reg(&p.ln2_gamma),
            ln2_beta: reg(&p.ln2_beta),
        }
    }

    /// Registers the block's tensors as constants (no gradients retained).
    pub fn register_frozen<S: Scalar>(tape: &mut Tape<S>, p: &BlockParams<S>) -> Self {
        Self::register(tape, p, false)
    }

    pub fn flat(&self) -> [NodeId; 12] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Registers block parameters as trainable leaves.
pub fn register_block<S: Scalar>(tape: &mut Tape<S>, params: &BlockParams<S>) -> BlockParamIds {
    BlockParamIds::register(tape, params, true)
}

/// `Q = X W_q`, `K = X W_k`, `V = X W_v`; no bias terms.
pub fn project_qkv<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    ids: &BlockParamIds,
) -> Result<(NodeId, NodeId, NodeId)> {
    let prev = tape.set_scope(MacScope::Category(MacCategory::Projections));
    let out = (|| {
        let q = tape.matmul(x, ids.w_q)?;
        let k = tape.matmul(x, ids.w_k)?;
        let v = tape.matmul(x, ids.w_v)?;
        Ok((q, k, v))
    })();
    tape.set_scope(prev);
    out
}

/// Per-level pooled `{Q^k, K^k, V^k}` triples, finest first.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    /// `(Q^k, K^k, V^k)` for k = 1..=L; level 1 is the unpooled input.
    pub levels: Vec<(NodeId, NodeId, NodeId)>,
    /// Pooling factor per level: `[1, p, p^2, ...]`.
    pub scale_factors: Vec<usize>,
}

/// Builds the pooling pyramid: level 1 is the input, each further level
/// averages `p` adjacent frames of the previous one.
pub fn build_scale_pyramid<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    p: usize,
    levels: usize,
) -> Result<ScalePyramid> {
    if p < 2 {
        return Err(Error::config(format!(
            "scale pyramid requires fractal factor >= 2, got {p}"
        )));
    }
    if levels < 1 {
        return Err(Error::config("scale pyramid requires at least one level"));
    }
    let t_len = tape.value(q).rows();
    let coarsest = p.pow(levels as u32 - 1);
    if !t_len.is_multiple_of(coarsest) {
        let padded = t_len.div_ceil(coarsest) * coarsest;
        return Err(Error::config(format!(
            "sequence length {t_len} is not divisible by p^(L-1) = {coarsest}; pad to {padded} ({} extra rows)",
            padded - t_len
        )));
    }

    let mut pyramid = ScalePyramid {
        levels: vec![(q, k, v)],
        scale_factors: vec![1],
    };
    for level in 1..levels {
        let (pq, pk, pv) = pyramid.levels[level - 1];
        let nq = tape.avg_pool_time(pq, p)?;
        let nk = tape.avg_pool_time(pk, p)?;
        let nv = tape.avg_pool_time(pv, p)?;
        pyramid.levels.push((nq, nk, nv));
        pyramid.scale_factors.push(pyramid.scale_factors[level - 1] * p);
    }
    Ok(pyramid)
}

/// Scaled dot-product attention over one contiguous row range and one head
/// column range. The matmuls run muted; callers book attention cost.
fn window_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    inv_sqrt_d: S,
) -> Result<NodeId> {
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, inv_sqrt_d);
    let probs = tape.softmax_rows(scaled);
    tape.matmul(probs, v)
}

/// Attention scaling denominator: full dimensionality for a single head,
/// per-head width otherwise.
fn head_dim(f: usize, heads: usize) -> usize {
    if heads == 1 {
        f
    } else {
        f / heads
    }
}

/// Windowed self-attention at one scale level: rows are partitioned into
/// `t / p` contiguous windows, attention runs independently per window and
/// per head, heads are concatenated along columns and windows along time.
pub fn fractal_attention_scale<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    p: usize,
    heads: usize,
) -> Result<NodeId> {
    let (t_len, f_dim) = tape.value(q).shape();
    for (name, id) in [("K", k), ("V", v)] {
        if tape.value(id).shape() != (t_len, f_dim) {
            return Err(Error::ShapeMismatch {
                op: if name == "K" {
                    "fractal_attention_scale K"
                } else {
                    "fractal_attention_scale V"
                },
                lhs_rows: t_len,
                lhs_cols: f_dim,
                rhs_rows: tape.value(id).rows(),
                rhs_cols: tape.value(id).cols(),
            });
        }
    }
    if p == 0 || t_len % p != 0 {
        return Err(Error::NotDivisible {
            what: "fractal attention window partition",
            len: t_len,
            divisor: p.max(1),
        });
    }
    if heads == 0 || f_dim % heads != 0 {
        return Err(Error::NotDivisible {
            what: "fractal attention head split",
            len: f_dim,
            divisor: heads.max(1),
        });
    }

    let d = head_dim(f_dim, heads);
    let inv_sqrt_d = S::one() / S::from_usize(d).unwrap().sqrt();
    let slice_width = f_dim / heads;
    let windows = t_len / p;

    let prev = tape.set_scope(MacScope::Muted);
    let result = (|| {
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * slice_width, slice_width)?,
                    tape.slice_cols(k, h * slice_width, slice_width)?,
                    tape.slice_cols(v, h * slice_width, slice_width)?,
                )
            };
            let mut window_outputs = Vec::with_capacity(windows);
            for w in 0..windows {
                let qw = tape.slice_rows(qh, w * p, p)?;
                let kw = tape.slice_rows(kh, w * p, p)?;
                let vw = tape.slice_rows(vh, w * p, p)?;
                window_outputs.push(window_attention(tape, qw, kw, vw, inv_sqrt_d)?);
            }
            head_outputs.push(tape.concat_rows(&window_outputs)?);
        }
        if heads == 1 {
            Ok(head_outputs[0])
        } else {
            tape.concat_cols(&head_outputs)
        }
    })();
    tape.set_scope(prev);

    // Cost model: windowed attention is booked at window^2 * head_dim MACs
    // per query frame and per side (scores, values); the global case books
    // t^2 * head_dim. Booked per head from the executed shapes.
    for _ in 0..heads {
        tape.charge(MacCategory::AttentionScores, (t_len * p * p * slice_width) as u64);
        tape.charge(MacCategory::AttentionValues, (t_len * p * p * slice_width) as u64);
    }
    result
}

/// Full global multi-head attention over all rows. Independent of the
/// window path; used by the baseline block.
fn global_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let (t_len, f_dim) = tape.value(q).shape();
    if heads == 0 || f_dim % heads != 0 {
        return Err(Error::NotDivisible {
            what: "global attention head split",
            len: f_dim,
            divisor: heads.max(1),
        });
    }
    let d = head_dim(f_dim, heads);
    let inv_sqrt_d = S::one() / S::from_usize(d).unwrap().sqrt();
    let slice_width = f_dim / heads;

    let prev = tape.set_scope(MacScope::Muted);
    let result = (|| {
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * slice_width, slice_width)?,
                    tape.slice_cols(k, h * slice_width, slice_width)?,
                    tape.slice_cols(v, h * slice_width, slice_width)?,
                )
            };
            head_outputs.push(window_attention(tape, qh, kh, vh, inv_sqrt_d)?);
        }
        if heads == 1 {
            Ok(head_outputs[0])
        } else {
            tape.concat_cols(&head_outputs)
        }
    })();
    tape.set_scope(prev);

    for _ in 0..heads {
        tape.charge(MacCategory::AttentionScores, (t_len * t_len * slice_width) as u64);
        tape.charge(MacCategory::AttentionValues, (t_len * t_len * slice_width) as u64);
    }
    result
}

/// Fuses per-level attention outputs: nearest up-sample each level back to
/// `t_len` rows, apply GELU, sum levels in ascending order, project by
/// `w_o` (no bias).
pub fn scale_mix<S: Scalar>(
    tape: &mut Tape<S>,
    level_outputs: &[NodeId],
    scale_factors: &[usize],
    w_o: NodeId,
    t_len: usize,
) -> Result<NodeId> {
    if level_outputs.is_empty() || level_outputs.len() != scale_factors.len() {
        return Err(Error::contract(format!(
            "scale_mix: {} level outputs vs {} scale factors",
            level_outputs.len(),
            scale_factors.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (&y, &s) in level_outputs.iter().zip(scale_factors) {
        let up = tape.upsample_nearest_time(y, s)?;
        if tape.value(up).rows() != t_len {
            return Err(Error::contract(format!(
                "scale_mix: level up-sampled to {} rows, expected {t_len}",
                tape.value(up).rows()
            )));
        }
        let g = tape.gelu(up);
        acc = Some(match acc {
            None => g,
            Some(a) => tape.add(a, g)?,
        });
    }
    let summed = acc.expect("at least one level");
    let prev = tape.set_scope(MacScope::Category(MacCategory::Mixer));
    let out = tape.matmul(summed, w_o);
    tape.set_scope(prev);
    out
}

/// Position-wise FFN: `gelu(x W1 + b1) W2 + b2`.
fn ffn<S: Scalar>(tape: &mut Tape<S>, x: NodeId, ids: &BlockParamIds) -> Result<NodeId> {
    let prev = tape.set_scope(MacScope::Category(MacCategory::Ffn));
    let out = (|| {
        let a1 = tape.matmul(x, ids.ffn_w1)?;
        let a1 = tape.add_row_broadcast(a1, ids.ffn_b1)?;
        let g = tape.gelu(a1);
        let a2 = tape.matmul(g, ids.ffn_w2)?;
        tape.add_row_broadcast(a2, ids.ffn_b2)
    })();
    tape.set_scope(prev);
    out
}

/// Post-norm residual wiring around an attention sublayer output and an FFN.
fn residual_tail<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    attn_out: NodeId,
    ids: &BlockParamIds,
    masks: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let eps = S::from_f64_lossy(LAYER_NORM_EPS);
    let attn_out = match masks {
        Some((m, _)) => tape.mul_elem(attn_out, m)?,
        None => attn_out,
    };
    let res1 = tape.add(x, attn_out)?;
    let h1 = tape.layer_norm(res1, ids.ln1_gamma, ids.ln1_beta, eps)?;
    let f = ffn(tape, h1, ids)?;
    let f = match masks {
        Some((_, m)) => tape.mul_elem(f, m)?,
        None => f,
    };
    let res2 = tape.add(h1, f)?;
    tape.layer_norm(res2, ids.ln2_gamma, ids.ln2_beta, eps)
}

/// One multi-scale block: projection, pyramid, per-scale window attention,
/// mixer, then residual + norm + FFN + residual + norm.
///
/// `masks` are optional inverted-dropout multipliers applied to the two
/// sublayer outputs before their residual additions.
pub(crate) fn mstr_block_forward_masked<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    ids: &BlockParamIds,
    p: usize,
    levels: usize,
    heads: usize,
    masks: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let t_len = tape.value(x).rows();
    let window_multiple = p
        .checked_pow(levels as u32)
        .ok_or_else(|| Error::config(format!("p^L overflows for p={p}, L={levels}")))?;
    if !t_len.is_multiple_of(window_multiple) {
        let padded = t_len.div_ceil(window_multiple) * window_multiple;
        return Err(Error::config(format!(
            "sequence length {t_len} is not divisible by p^L = {window_multiple}; pad to {padded}"
        )));
    }
    let (q, k, v) = project_qkv(tape, x, ids)?;
    let pyramid = build_scale_pyramid(tape, q, k, v, p, levels)?;
    let mut level_outputs = Vec::with_capacity(levels);
    for &(lq, lk, lv) in &pyramid.levels {
        level_outputs.push(fractal_attention_scale(tape, lq, lk, lv, p, heads)?);
    }
    let mixed = scale_mix(tape, &level_outputs, &pyramid.scale_factors, ids.w_o, t_len)?;
    residual_tail(tape, x, mixed, ids, masks)
}

pub fn mstr_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    ids: &BlockParamIds,
    p: usize,
    levels: usize,
    heads: usize,
) -> Result<NodeId> {
    mstr_block_forward_masked(tape, x, ids, p, levels, heads, None)
}

/// Baseline block: full global attention, then the same GELU + `w_o`
/// fusion and residual/norm/FFN wiring as the multi-scale block.
pub(crate) fn vanilla_block_forward_masked<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    ids: &BlockParamIds,
    heads: usize,
    masks: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let (q, k, v) = project_qkv(tape, x, ids)?;
    let attn = global_attention(tape, q, k, v, heads)?;
    let g = tape.gelu(attn);
    let prev = tape.set_scope(MacScope::Category(MacCategory::Mixer));
    let proj = tape.matmul(g, ids.w_o);
    tape.set_scope(prev);
    residual_tail(tape, x, proj?, ids, masks)
}

pub fn vanilla_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    ids: &BlockParamIds,
    heads: usize,
) -> Result<NodeId> {
    vanilla_block_forward_masked(tape, x, ids, heads, None)
}
