//! Full sequence classifiers: input projection, sinusoidal positions,
//! a stack of encoder blocks (multi-scale or full-attention baseline),
//! mean pooling over valid frames, and a three-layer classifier head.
//! Both variants share one parameter layout so weights can be transplanted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{
    self, glorot_uniform, BlockParamIds, BlockParams,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{MacCategory, MacScope, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mstr,
    Vanilla,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mstr => "mstr",
            Variant::Vanilla => "vanilla",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mstr" => Ok(Variant::Mstr),
            "vanilla" => Ok(Variant::Vanilla),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected 'mstr' or 'vanilla')"
            ))),
        }
    }
}

/// Architecture hyperparameters shared by both variants.
#[derive(Debug, Clone, PartialEq)]
pub struct MstrConfig {
    pub input_dim: usize,
    /// Model width F.
    pub model_dim: usize,
    /// Fractal factor: pooling window and attention window length.
    pub fractal_p: usize,
    /// Number of scale levels L.
    pub scale_levels: usize,
    pub heads: usize,
    pub blocks: usize,
    pub num_classes: usize,
    pub d_ff: usize,
    /// First and second classifier hidden widths.
    pub fc1_dim: usize,
    pub fc2_dim: usize,
    pub use_positional: bool,
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl MstrConfig {
    /// Defaults: p = 3, L = 4, 4 blocks, 16 heads, `d_ff = 4F`, classifier
    /// widths F/2 and F/4, positional encoding on, no dropout.
    pub fn new(input_dim: usize, model_dim: usize, num_classes: usize) -> Self {
        MstrConfig {
            input_dim,
            model_dim,
            fractal_p: 3,
            scale_levels: 4,
            heads: 16,
            blocks: 4,
            num_classes,
            d_ff: 4 * model_dim,
            fc1_dim: (model_dim / 2).max(1),
            fc2_dim: (model_dim / 4).max(1),
            use_positional: true,
            dropout_rate: 0.0,
            variant: Variant::Mstr,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.model_dim == 0
            || self.d_ff == 0
            || self.fc1_dim == 0
            || self.fc2_dim == 0
            || self.blocks == 0
        {
            return Err(Error::config("all model dimensions must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.fractal_p < 2 {
            return Err(Error::config("fractal factor must be at least 2"));
        }
        if self.scale_levels < 1 {
            return Err(Error::config("need at least one scale level"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must be in [0, 1)"));
        }
        self.window_multiple()?;
        Ok(())
    }

    /// `p^L`: every sequence fed to the multi-scale stack must have a
    /// multiple of this many rows.
    pub fn window_multiple(&self) -> Result<usize> {
        self.fractal_p
            .checked_pow(self.scale_levels as u32)
            .ok_or_else(|| {
                Error::config(format!(
                    "p^L overflows for p={}, L={}",
                    self.fractal_p, self.scale_levels
                ))
            })
    }

    /// Least multiple of `p^L` that holds `valid_len` rows.
    pub fn padded_len(&self, valid_len: usize) -> usize {
        let m = self.window_multiple().expect("validated config");
        valid_len.max(1).div_ceil(m) * m
    }
}

/// All trainable tensors of one model.
///
/// Flat order (also the checkpoint order): `input_proj`, then per block
/// `w_q, w_k, w_v, w_o, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln1_gamma,
/// ln1_beta, ln2_gamma, ln2_beta`, then `fc1_w, fc1_b, fc2_w, fc2_b,
/// fc3_w, fc3_b`.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub input_proj: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub fc1_w: Tensor<S>,
    pub fc1_b: Tensor<S>,
    pub fc2_w: Tensor<S>,
    pub fc2_b: Tensor<S>,
    pub fc3_w: Tensor<S>,
    pub fc3_b: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn flat(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.input_proj];
        for b in &self.blocks {
            out.extend(b.tensors().map(|(_, t)| t));
        }
        out.extend([
            &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b, &self.fc3_w, &self.fc3_b,
        ]);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.input_proj];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.fc3_w,
            &mut self.fc3_b,
        ]);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["input_proj".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().map(|(name, _)| format!("block{i}.{name}")));
        }
        out.extend(
            ["fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b"]
                .map(str::to_string),
        );
        out
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            input_proj: self.input_proj.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    w_q: b.w_q.cast(),
                    w_k: b.w_k.cast(),
                    w_v: b.w_v.cast(),
                    w_o: b.w_o.cast(),
                    ffn_w1: b.ffn_w1.cast(),
                    ffn_b1: b.ffn_b1.cast(),
                    ffn_w2: b.ffn_w2.cast(),
                    ffn_b2: b.ffn_b2.cast(),
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                })
                .collect(),
            fc1_w: self.fc1_w.cast(),
            fc1_b: self.fc1_b.cast(),
            fc2_w: self.fc2_w.cast(),
            fc2_b: self.fc2_b.cast(),
            fc3_w: self.fc3_w.cast(),
            fc3_b: self.fc3_b.cast(),
        }
    }

    /// Expected shape of every tensor, in flat order.
    pub fn expected_shapes(config: &MstrConfig) -> Vec<(usize, usize)> {
        let f = config.model_dim;
        let mut shapes = vec![(config.input_dim, f)];
        for _ in 0..config.blocks {
            shapes.extend([
                (f, f),
                (f, f),
                (f, f),
                (f, f),
                (f, config.d_ff),
                (1, config.d_ff),
                (config.d_ff, f),
                (1, f),
                (1, f),
                (1, f),
                (1, f),
                (1, f),
            ]);
        }
        shapes.extend([
            (f, config.fc1_dim),
            (1, config.fc1_dim),
            (config.fc1_dim, config.fc2_dim),
            (1, config.fc2_dim),
            (config.fc2_dim, config.num_classes),
            (1, config.num_classes),
        ]);
        shapes
    }

    /// Rebuilds params from tensors in flat order, validating shapes.
    pub fn from_flat(config: &MstrConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let shapes = Self::expected_shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, &(r, c))) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != (r, c) {
                return Err(Error::config(format!(
                    "parameter {i} has shape {}x{}, expected {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        let mut iter = tensors.into_iter();
        let input_proj = iter.next().unwrap();
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(BlockParams {
                w_q: iter.next().unwrap(),
                w_k: iter.next().unwrap(),
                w_v: iter.next().unwrap(),
                w_o: iter.next().unwrap(),
                ffn_w1: iter.next().unwrap(),
                ffn_b1: iter.next().unwrap(),
                ffn_w2: iter.next().unwrap(),
                ffn_b2: iter.next().unwrap(),
                ln1_gamma: iter.next().unwrap(),
                ln1_beta: iter.next().unwrap(),
                ln2_gamma: iter.next().unwrap(),
                ln2_beta: iter.next().unwrap(),
            });
        }
        Ok(ModelParams {
            input_proj,
            blocks,
            fc1_w: iter.next().unwrap(),
            fc1_b: iter.next().unwrap(),
            fc2_w: iter.next().unwrap(),
            fc2_b: iter.next().unwrap(),
            fc3_w: iter.next().unwrap(),
            fc3_b: iter.next().unwrap(),
        })
    }
}

/// Parameter count as a pure function of the configuration; identical for
/// both variants at equal dims.
pub fn parameter_count(config: &MstrConfig) -> usize {
    ModelParams::<f32>::expected_shapes(config)
        .iter()
        .map(|(r, c)| r * c)
        .sum()
}

/// Glorot-uniform weights, zero biases, unit gammas; deterministic per seed.
pub fn init_params<S: Scalar>(config: &MstrConfig, seed: u64) -> Result<ModelParams<S>> {
    config.validate()?;
    let f = config.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelParams {
        input_proj: glorot_uniform(&mut rng, config.input_dim, f),
        blocks: (0..config.blocks)
            .map(|_| BlockParams::init(f, config.d_ff, &mut rng))
            .collect(),
        fc1_w: glorot_uniform(&mut rng, f, config.fc1_dim),
        fc1_b: Tensor::zeros(1, config.fc1_dim),
        fc2_w: glorot_uniform(&mut rng, config.fc1_dim, config.fc2_dim),
        fc2_b: Tensor::zeros(1, config.fc2_dim),
        fc3_w: glorot_uniform(&mut rng, config.fc2_dim, config.num_classes),
        fc3_b: Tensor::zeros(1, config.num_classes),
    })
}

/// Tape ids of all registered parameters, mirroring `ModelParams`.
pub struct ParamIds {
    pub input_proj: NodeId,
    pub blocks: Vec<BlockParamIds>,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
    pub fc3_w: NodeId,
    pub fc3_b: NodeId,
}

impl ParamIds {
    /// Node ids in the same flat order as `ModelParams::flat`.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = vec![self.input_proj];
        for b in &self.blocks {
            out.extend(b.flat());
        }
        out.extend([
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b, self.fc3_w, self.fc3_b,
        ]);
        out
    }
}

/// Snapshots all parameters onto the tape as trainable leaves.
pub fn register_params<S: Scalar>(tape: &mut Tape<S>, params: &ModelParams<S>) -> ParamIds {
    ParamIds {
        input_proj: tape.param(params.input_proj.clone()),
        blocks: params
            .blocks
            .iter()
            .map(|b| block::register_block(tape, b))
            .collect(),
        fc1_w: tape.param(params.fc1_w.clone()),
        fc1_b: tape.param(params.fc1_b.clone()),
        fc2_w: tape.param(params.fc2_w.clone()),
        fc2_b: tape.param(params.fc2_b.clone()),
        fc3_w: tape.param(params.fc3_w.clone()),
        fc3_b: tape.param(params.fc3_b.clone()),
    }
}

/// Sinusoidal absolute positions: `sin` on even columns, `cos` on odd, with
/// the standard 10000^(2i/F) wavelength ladder.
pub fn positional_encoding<S: Scalar>(t_len: usize, f_dim: usize) -> Tensor<S> {
    let mut pe = Tensor::zeros(t_len, f_dim);
    for pos in 0..t_len {
        for c in 0..f_dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / f_dim as f64);
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(pos, c, S::from_f64_lossy(v));
        }
    }
    pe
}

/// Per-sample dropout context used during training.
pub(crate) struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout_mask<S: Scalar>(tape: &mut Tape<S>, rows: usize, cols: usize, ctx: &mut DropoutCtx) -> NodeId {
    let keep = 1.0 - ctx.rate;
    let scale = S::from_f64_lossy(1.0 / keep);
    let data = (0..rows * cols)
        .map(|_| {
            if ctx.rng.random_range(0.0..1.0) < keep {
                scale
            } else {
                S::zero()
            }
        })
        .collect();
    tape.leaf(Tensor::new(rows, cols, data).expect("valid shape"))
}

pub(crate) fn model_forward_impl<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    valid_len: usize,
    ids: &ParamIds,
    config: &MstrConfig,
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<NodeId> {
    let (t_len, in_dim) = tape.value(features).shape();
    if valid_len == 0 {
        return Err(Error::Empty("model_forward valid_len"));
    }
    if valid_len > t_len {
        return Err(Error::contract(format!(
            "valid_len {valid_len} exceeds sequence length {t_len}"
        )));
    }
    if in_dim != config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "model_forward input projection",
            lhs_rows: t_len,
            lhs_cols: in_dim,
            rhs_rows: config.input_dim,
            rhs_cols: config.model_dim,
        });
    }
    if config.variant == Variant::Mstr {
        let m = config.window_multiple()?;
        if t_len % m != 0 {
            return Err(Error::config(format!(
                "sequence length {t_len} is not a multiple of p^L = {m}; pad first"
            )));
        }
    }

    let prev = tape.set_scope(MacScope::Category(MacCategory::Projections));
    let mut h = tape.matmul(features, ids.input_proj)?;
    tape.set_scope(prev);

    if config.use_positional {
        let pe = tape.leaf(positional_encoding::<S>(t_len, config.model_dim));
        h = tape.add(h, pe)?;
    }

    for block_ids in &ids.blocks {
        let masks = match dropout.as_mut() {
            Some(ctx) if ctx.rate > 0.0 => {
                let m1 = dropout_mask(tape, t_len, config.model_dim, ctx);
                let m2 = dropout_mask(tape, t_len, config.model_dim, ctx);
                Some((m1, m2))
            }
            _ => None,
        };
        h = match config.variant {
            Variant::Mstr => block::mstr_block_forward_masked(
                tape,
                h,
                block_ids,
                config.fractal_p,
                config.scale_levels,
                config.heads,
                masks,
            )?,
            Variant::Vanilla => {
                block::vanilla_block_forward_masked(tape, h, block_ids, config.heads, masks)?
            }
        };
    }

    // Utterance embedding: mean over valid frames only.
    let valid = tape.slice_rows(h, 0, valid_len)?;
    let pooled = tape.mean_rows(valid);

    let prev = tape.set_scope(MacScope::Category(MacCategory::Classifier));
    let logits = (|| {
        let a1 = tape.matmul(pooled, ids.fc1_w)?;
        let a1 = tape.add_row_broadcast(a1, ids.fc1_b)?;
        let g1 = tape.gelu(a1);
        let a2 = tape.matmul(g1, ids.fc2_w)?;
        let a2 = tape.add_row_broadcast(a2, ids.fc2_b)?;
        let g2 = tape.gelu(a2);
        let a3 = tape.matmul(g2, ids.fc3_w)?;
        tape.add_row_broadcast(a3, ids.fc3_b)
    })();
    tape.set_scope(prev);
    logits
}

/// Runs the classifier on a padded feature sequence: projection, optional
/// positions, the block stack, mean pooling over the first `valid_len`
/// rows, and the three-layer head. Returns 1 x num_classes logits.
pub fn model_forward<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    valid_len: usize,
    ids: &ParamIds,
    config: &MstrConfig,
) -> Result<NodeId> {
    model_forward_impl(tape, features, valid_len, ids, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> MstrConfig {
        let mut c = MstrConfig::new(5, 8, 3);
        c.fractal_p = 3;
        c.scale_levels = 2;
        c.heads = 2;
        c.blocks = 1;
        c
    }

    fn random_features(seed: u64, rows: usize, cols: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        for (x, y) in a.flat().iter().zip(b.flat()) {
            assert!(x.bit_eq(y));
        }
        let c = init_params::<f32>(&cfg, 8).unwrap();
        let any_diff = a
            .flat()
            .iter()
            .zip(c.flat())
            .any(|(x, y)| !x.bit_eq(y));
        assert!(any_diff, "different seeds must differ somewhere");
    }

    #[test]
    fn init_respects_glorot_limits() {
        let cfg = tiny_config();
        let params = init_params::<f64>(&cfg, 3).unwrap();
        for (name, t) in params
            .tensor_names()
            .into_iter()
            .zip(params.flat())
        {
            let (rows, cols) = t.shape();
            if name.contains("_b") || name.contains("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} should be zero");
            } else if name.contains("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name} should be one");
            } else {
                let lim = (6.0 / (rows + cols) as f64).sqrt();
                assert!(
                    t.data().iter().all(|&v| v.abs() <= lim),
                    "{name} exceeds its Glorot limit"
                );
            }
        }
    }

    #[test]
    fn parameter_count_is_variant_independent_and_exact() {
        let cfg = tiny_config();
        let mstr = init_params::<f32>(&cfg, 1).unwrap();
        let vanilla =
            init_params::<f32>(&cfg.clone().with_variant(Variant::Vanilla), 2).unwrap();
        assert_eq!(mstr.count(), vanilla.count());
        assert_eq!(mstr.count(), parameter_count(&cfg));
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_config();
        let t_len = cfg.padded_len(9); // -> 9
        let x = random_features(5, t_len, cfg.input_dim);
        let params = init_params::<f32>(&cfg, 11).unwrap();

        let run = || {
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let xn = tape.leaf(x.clone());
            let logits = model_forward(&mut tape, xn, 9, &ids, &cfg).unwrap();
            tape.value(logits).clone()
        };
        let l1 = run();
        assert_eq!(l1.shape(), (1, 3));
        assert!(l1.bit_eq(&run()));
    }

    #[test]
    fn empty_valid_len_is_rejected() {
        let cfg = tiny_config();
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let ids = register_params(&mut tape, &params);
        let xn = tape.leaf(Tensor::<f32>::zeros(9, 5));
        assert!(matches!(
            model_forward(&mut tape, xn, 0, &ids, &cfg),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn padding_does_not_change_logits_at_single_level() {
        let mut cfg = tiny_config();
        cfg.scale_levels = 1; // windows of 3; valid_len multiple of 3
        let valid = 12;
        let x = random_features(6, valid, cfg.input_dim);
        let params = init_params::<f32>(&cfg, 13).unwrap();

        let run = |pad_to: usize| {
            let mut padded = Tensor::zeros(pad_to, cfg.input_dim);
            for r in 0..valid {
                padded.row_mut(r).copy_from_slice(x.row(r));
            }
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let xn = tape.leaf(padded);
            let logits = model_forward(&mut tape, xn, valid, &ids, &cfg).unwrap();
            tape.value(logits).clone()
        };

        let short = run(12);
        let long = run(18);
        assert!(short.max_abs_diff(&long) < 1e-6);
    }

    #[test]
    fn vanilla_blocks_match_degenerate_mstr_with_transplanted_weights() {
        let t_len = 12usize;
        let mut cfg = MstrConfig::new(5, 8, 3);
        cfg.fractal_p = t_len; // window covers the whole sequence
        cfg.scale_levels = 1;
        cfg.heads = 2;
        cfg.blocks = 1;

        let params = init_params::<f32>(&cfg, 17).unwrap();
        let x = random_features(18, t_len, cfg.input_dim);

        let run = |variant: Variant| {
            let cfg = cfg.clone().with_variant(variant);
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let xn = tape.leaf(x.clone());
            let logits = model_forward(&mut tape, xn, t_len, &ids, &cfg).unwrap();
            tape.value(logits).clone()
        };

        let fractal = run(Variant::Mstr);
        let vanilla = run(Variant::Vanilla);
        assert!(fractal.max_abs_diff(&vanilla) < 1e-6);
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding::<f64>(3, 4);
        // Row 0: sin(0)=0, cos(0)=1 alternating.
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1.0f64.sin()).abs() < 1e-12);
        assert!((pe.get(1, 1) - 1.0f64.cos()).abs() < 1e-12);
        // Wavelength ladder: column pair 1 uses 10000^(-2/4).
        let w = 1.0 / 10000f64.powf(0.5);
        assert!((pe.get(1, 2) - w.sin()).abs() < 1e-12);
    }

    #[test]
    fn dropout_masks_only_affect_training_mode() {
        let mut cfg = tiny_config();
        cfg.dropout_rate = 0.5;
        let t_len = 9;
        let x = random_features(21, t_len, cfg.input_dim);
        let params = init_params::<f32>(&cfg, 23).unwrap();

        // Inference path ignores dropout_rate entirely.
        let infer = |_: u64| {
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let xn = tape.leaf(x.clone());
            let l = model_forward(&mut tape, xn, t_len, &ids, &cfg).unwrap();
            tape.value(l).clone()
        };
        assert!(infer(0).bit_eq(&infer(1)));

        // Training path with a mask RNG differs from inference.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let ids = register_params(&mut tape, &params);
        let xn = tape.leaf(x.clone());
        let l = model_forward_impl(
            &mut tape,
            xn,
            t_len,
            &ids,
            &cfg,
            Some(DropoutCtx { rate: cfg.dropout_rate, rng: &mut rng }),
        )
        .unwrap();
        assert!(!tape.value(l).bit_eq(&infer(0)));
    }
}
