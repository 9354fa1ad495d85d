//! Fast end-to-end property checks, runnable from the CLI.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block;
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::complexity::{analytic_flops_mstr, analytic_flops_vtr, measure_block_macs};
use crate::data::{read_feature_file, write_feature_file};
use crate::error::Result;
use crate::gradcheck;
use crate::metrics::compute_metrics;
use crate::model::{self, MstrConfig, Variant};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Runs the whole quick-check battery; `scratch` is a writable directory
/// for round-trip checks.
pub fn run_all(scratch: &Path, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Gradient checks for all primitives.
    let grad = gradcheck::check_primitives(seed);
    let worst = grad
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("nonempty");
    out.push(CheckResult::new(
        "gradcheck-primitives",
        grad.iter().all(|c| c.pass),
        format!("worst {} rel err {:.2e}", worst.name, worst.rel_err),
    ));

    // Attention probability rows sum to one across scales and heads.
    {
        let x = random_tensor(&mut rng, 27, 8);
        let mut tape = Tape::new();
        let q = tape.leaf(x.clone());
        let k = tape.leaf(x.clone());
        let v = tape.leaf(x);
        block::fractal_attention_scale(&mut tape, q, k, v, 3, 4)?;
        let mut worst: f64 = 0.0;
        for id in tape.softmax_node_ids() {
            let probs = tape.value(id);
            for r in 0..probs.rows() {
                let sum: f64 = probs.row(r).iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        out.push(CheckResult::new(
            "attention-row-sums",
            worst < 1e-6,
            format!("worst deviation {worst:.2e}"),
        ));
    }

    // Pool/upsample round trip and nested pooling.
    {
        let x = random_tensor(&mut rng, 18, 5);
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let up = tape.upsample_nearest_time(a, 3)?;
        let back = tape.avg_pool_time(up, 3)?;
        let roundtrip = tape.value(back).max_abs_diff(&x);
        let once = tape.avg_pool_time(a, 3)?;
        let twice = tape.avg_pool_time(once, 3)?;
        let direct = tape.avg_pool_time(a, 9)?;
        let nested = tape.value(twice).max_abs_diff(tape.value(direct));
        out.push(CheckResult::new(
            "pool-upsample-roundtrip",
            roundtrip < 1e-12 && nested < 1e-12,
            format!("roundtrip {roundtrip:.2e}, nested {nested:.2e}"),
        ));
    }

    // Pinned cost-formula values and counter agreement.
    {
        let vtr = analytic_flops_vtr(81, 8);
        let mstr = analytic_flops_mstr(81, 8, 3, 4)?;
        let counted = measure_block_macs(Variant::Mstr, 81, 8, 3, 4, 1)?;
        let counted_v = measure_block_macs(Variant::Vanilla, 81, 8, 3, 4, 1)?;
        let pass = vtr == 52_488
            && mstr == 8_640
            && counted.attention_scores == mstr
            && counted.attention_values == mstr
            && counted_v.attention_scores == vtr;
        out.push(CheckResult::new(
            "cost-formulas",
            pass,
            format!(
                "vtr {vtr}, mstr {mstr}, counted {}/{}",
                counted_v.attention_scores, counted.attention_scores
            ),
        ));
    }

    // Parameter parity between variants.
    {
        let cfg = small_config();
        let a = model::init_params::<f32>(&cfg, 0)?;
        let b = model::init_params::<f32>(&cfg.clone().with_variant(Variant::Vanilla), 1)?;
        out.push(CheckResult::new(
            "parameter-parity",
            a.count() == b.count() && a.count() == model::parameter_count(&cfg),
            format!("{} parameters each", a.count()),
        ));
    }

    // Feature file and checkpoint round trips.
    {
        let path = scratch.join("selftest.msf");
        let t: Tensor<f32> = random_tensor(&mut rng, 7, 5).cast();
        write_feature_file(&path, &t)?;
        let back = read_feature_file(&path)?;
        let feature_ok = t.bit_eq(&back);

        let cfg = small_config();
        let params = model::init_params::<f32>(&cfg, 3)?;
        let ck = scratch.join("selftest.ckpt");
        write_checkpoint(&ck, &cfg, &params)?;
        let (cfg2, params2) = read_checkpoint(&ck)?;
        let ck2 = scratch.join("selftest2.ckpt");
        write_checkpoint(&ck2, &cfg2, &params2)?;
        let checkpoint_ok = std::fs::read(&ck)? == std::fs::read(&ck2)?;
        out.push(CheckResult::new(
            "round-trips",
            feature_ok && checkpoint_ok,
            format!("feature {feature_ok}, checkpoint {checkpoint_ok}"),
        ));
    }

    // Metrics spot values.
    {
        let m = compute_metrics(&[(0, 0), (0, 0), (0, 0), (1, 0)], 2)?;
        out.push(CheckResult::new(
            "metrics-hand-counts",
            (m.wa - 0.75).abs() < 1e-12 && (m.ua - 0.5).abs() < 1e-12,
            format!("wa {:.4}, ua {:.4}", m.wa, m.ua),
        ));
    }

    // Deterministic logits and degeneracy to the baseline block.
    {
        let cfg = small_config();
        let params = model::init_params::<f32>(&cfg, 5)?;
        let x: Tensor<f32> = random_tensor(&mut rng, 9, cfg.input_dim).cast();
        let run = |cfg: &MstrConfig| -> Result<Tensor<f32>> {
            let mut tape = Tape::new();
            let ids = model::register_params(&mut tape, &params);
            let xn = tape.leaf(x.clone());
            let l = model::model_forward(&mut tape, xn, 9, &ids, cfg)?;
            Ok(tape.value(l).clone())
        };
        let determinism = run(&cfg)?.bit_eq(&run(&cfg)?);

        let mut degen = cfg.clone();
        degen.fractal_p = 9;
        degen.scale_levels = 1;
        let fractal = run(&degen)?;
        let vanilla = run(&degen.clone().with_variant(Variant::Vanilla))?;
        let diff = fractal.max_abs_diff(&vanilla);
        out.push(CheckResult::new(
            "determinism-and-degeneracy",
            determinism && diff < 1e-6,
            format!("deterministic {determinism}, degeneracy diff {diff:.2e}"),
        ));
    }

    Ok(out)
}

fn small_config() -> MstrConfig {
    let mut cfg = MstrConfig::new(5, 8, 3);
    cfg.fractal_p = 3;
    cfg.scale_levels = 2;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_selftest_checks_pass() {
        let dir = tempfile::tempdir().unwrap();
        let results = run_all(dir.path(), 0).unwrap();
        assert!(results.len() >= 8);
        for check in results {
            assert!(check.pass, "{}: {}", check.name, check.detail);
        }
    }
}
