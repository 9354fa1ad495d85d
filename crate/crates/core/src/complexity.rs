//! Attention cost accounting: closed-form per-side MAC formulas for the
//! full-attention baseline and the multi-scale windowed variant, empirical
//! counts measured from instrumented forward passes, and scaling reports.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{self, BlockParams};
use crate::error::{Error, Result};
use crate::model::{self, MstrConfig, Variant};
use crate::tape::{MacCategory, MacCounter, Tape};
use crate::tensor::Tensor;

/// Per-side attention cost of full global attention: `T^2 * F`.
pub fn analytic_flops_vtr(t_len: usize, f_dim: usize) -> u64 {
    (t_len as u64) * (t_len as u64) * (f_dim as u64)
}

/// Per-side attention cost of the multi-scale windowed variant:
/// `sum over k of (T / p^(k-1)) * p^2 * F`. Requires `p^(L-1)` divides `T`.
pub fn analytic_flops_mstr(t_len: usize, f_dim: usize, p: usize, levels: usize) -> Result<u64> {
    check_mstr_inputs(t_len, p, levels)?;
    let mut total: u64 = 0;
    let mut scale = 1u64;
    for _ in 0..levels {
        let level_len = t_len as u64 / scale;
        total += level_len * (p as u64) * (p as u64) * (f_dim as u64);
        scale *= p as u64;
    }
    Ok(total)
}

/// Same quantity via the geometric-series closed form
/// `p^2 * F * (T / p^(L-1)) * (1 + p + ... + p^(L-1))`, exact in integers.
pub fn analytic_flops_mstr_closed_form(
    t_len: usize,
    f_dim: usize,
    p: usize,
    levels: usize,
) -> Result<u64> {
    check_mstr_inputs(t_len, p, levels)?;
    let p = p as u64;
    let coarsest = p.pow(levels as u32 - 1);
    let geometric: u64 = (0..levels as u32).map(|j| p.pow(j)).sum();
    Ok(p * p * (f_dim as u64) * (t_len as u64 / coarsest) * geometric)
}

fn check_mstr_inputs(t_len: usize, p: usize, levels: usize) -> Result<()> {
    if p < 2 || levels < 1 || t_len == 0 {
        return Err(Error::config(format!(
            "need p >= 2, L >= 1, T >= 1; got T={t_len}, p={p}, L={levels}"
        )));
    }
    let coarsest = p
        .checked_pow(levels as u32 - 1)
        .ok_or_else(|| Error::config(format!("p^(L-1) overflows for p={p}, L={levels}")))?;
    if !t_len.is_multiple_of(coarsest) {
        return Err(Error::config(format!(
            "T={t_len} is not divisible by p^(L-1)={coarsest}"
        )));
    }
    Ok(())
}

/// Empirically counted MACs of one forward pass, attributed by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentMacs {
    pub projections: u64,
    pub attention_scores: u64,
    pub attention_values: u64,
    pub mixer: u64,
    pub ffn: u64,
    pub classifier: u64,
    pub other: u64,
}

impl ComponentMacs {
    /// Reads the counter of a finished run; the counter must be enabled.
    pub fn from_tape<S: crate::scalar::Scalar>(tape: &Tape<S>) -> Result<Self> {
        let c: &MacCounter = tape.macs();
        if !c.enabled() {
            return Err(Error::contract(
                "MAC counter was not enabled for this run",
            ));
        }
        Ok(ComponentMacs {
            projections: c.get(MacCategory::Projections),
            attention_scores: c.get(MacCategory::AttentionScores),
            attention_values: c.get(MacCategory::AttentionValues),
            mixer: c.get(MacCategory::Mixer),
            ffn: c.get(MacCategory::Ffn),
            classifier: c.get(MacCategory::Classifier),
            other: c.get(MacCategory::Other),
        })
    }

    pub fn total(&self) -> u64 {
        self.projections
            + self.attention_scores
            + self.attention_values
            + self.mixer
            + self.ffn
            + self.classifier
            + self.other
    }
}

/// Runs one encoder block forward on a zero sequence and returns its
/// counted MACs per component.
pub fn measure_block_macs(
    variant: Variant,
    t_len: usize,
    f_dim: usize,
    p: usize,
    levels: usize,
    heads: usize,
) -> Result<ComponentMacs> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = BlockParams::<f32>::init(f_dim, 4 * f_dim, &mut rng);
    let mut tape = Tape::new();
    let ids = block::register_block(&mut tape, &params);
    let x = tape.leaf(Tensor::zeros(t_len, f_dim));
    match variant {
        Variant::Mstr => block::mstr_block_forward(&mut tape, x, &ids, p, levels, heads)?,
        Variant::Vanilla => block::vanilla_block_forward(&mut tape, x, &ids, heads)?,
    };
    ComponentMacs::from_tape(&tape)
}

/// Runs one full-model forward on a zero sequence of `t_len` rows.
pub fn measure_model_macs(config: &MstrConfig, t_len: usize) -> Result<ComponentMacs> {
    let params = model::init_params::<f32>(config, 0)?;
    let mut tape = Tape::new();
    let ids = model::register_params(&mut tape, &params);
    let x = tape.leaf(Tensor::zeros(t_len, config.input_dim));
    model::model_forward(&mut tape, x, t_len, &ids, config)?;
    ComponentMacs::from_tape(&tape)
}

/// What a `FlopsReport` covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsScope {
    AttentionOnly,
    FullModel,
}

impl FlopsScope {
    pub fn name(self) -> &'static str {
        match self {
            FlopsScope::AttentionOnly => "attention-only",
            FlopsScope::FullModel => "full-model",
        }
    }
}

/// Analytic and counted per-side attention MACs for one sequence length.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub t_len: usize,
    pub f_dim: usize,
    pub p: usize,
    pub levels: usize,
    pub analytic_vtr: u64,
    pub analytic_mstr: u64,
    pub counted_vtr_macs: u64,
    pub counted_mstr_macs: u64,
    pub reduction_pct: f64,
    pub scope: FlopsScope,
}

impl FlopsReport {
    /// Builds one attention-only report; counted values come from
    /// instrumented single-block forward passes with one head.
    pub fn measure(t_len: usize, f_dim: usize, p: usize, levels: usize) -> Result<FlopsReport> {
        let analytic_vtr = analytic_flops_vtr(t_len, f_dim);
        let analytic_mstr = analytic_flops_mstr(t_len, f_dim, p, levels)?;

        let vanilla = measure_block_macs(Variant::Vanilla, t_len, f_dim, p, levels, 1)?;
        let fractal = measure_block_macs(Variant::Mstr, t_len, f_dim, p, levels, 1)?;
        debug_assert_eq!(vanilla.attention_scores, vanilla.attention_values);
        debug_assert_eq!(fractal.attention_scores, fractal.attention_values);

        Ok(FlopsReport {
            t_len,
            f_dim,
            p,
            levels,
            analytic_vtr,
            analytic_mstr,
            counted_vtr_macs: vanilla.attention_scores,
            counted_mstr_macs: fractal.attention_scores,
            reduction_pct: reduction_pct(analytic_mstr, analytic_vtr),
            scope: FlopsScope::AttentionOnly,
        })
    }
}

/// `100 * (1 - mstr / vtr)`.
pub fn reduction_pct(mstr: u64, vtr: u64) -> f64 {
    100.0 * (1.0 - mstr as f64 / vtr as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Per-length reports plus fitted growth exponents for both variants.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<FlopsReport>,
    pub vanilla_slope: f64,
    pub mstr_slope: f64,
}

/// Measures counted attention MACs over a list of sequence lengths and fits
/// log-log growth exponents. Every length must be divisible by `p^L`.
pub fn scaling_report(t_list: &[usize], f_dim: usize, p: usize, levels: usize) -> Result<ScalingReport> {
    if t_list.len() < 2 {
        return Err(Error::config("scaling report needs at least two lengths"));
    }
    let mut rows = Vec::with_capacity(t_list.len());
    for &t_len in t_list {
        let multiple = p
            .checked_pow(levels as u32)
            .ok_or_else(|| Error::config(format!("p^L overflows for p={p}, L={levels}")))?;
        if t_len % multiple != 0 {
            return Err(Error::config(format!(
                "T={t_len} is not divisible by p^L={multiple}"
            )));
        }
        rows.push(FlopsReport::measure(t_len, f_dim, p, levels)?);
    }
    let vanilla_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.t_len as f64, r.counted_vtr_macs as f64))
        .collect();
    let mstr_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.t_len as f64, r.counted_mstr_macs as f64))
        .collect();
    Ok(ScalingReport {
        rows,
        vanilla_slope: log_log_slope(&vanilla_pts),
        mstr_slope: log_log_slope(&mstr_pts),
    })
}

impl ScalingReport {
    /// CSV with one row per (length, variant).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,F,p,L,variant,analytic,counted,reduction_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},vanilla,{},{},{:.4}\n",
                r.t_len, r.f_dim, r.p, r.levels, r.analytic_vtr, r.counted_vtr_macs, r.reduction_pct
            ));
            out.push_str(&format!(
                "{},{},{},{},mstr,{},{},{:.4}\n",
                r.t_len, r.f_dim, r.p, r.levels, r.analytic_mstr, r.counted_mstr_macs, r.reduction_pct
            ));
        }
        out
    }

    /// Fixed-width text table mirroring the CSV, plus fitted slopes.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:>4} {:>3} {:>3} {:>9} {:>14} {:>14} {:>13}\n",
            "T", "F", "p", "L", "variant", "analytic", "counted", "reduction_pct"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:>4} {:>3} {:>3} {:>9} {:>14} {:>14} {:>13.4}\n",
                r.t_len, r.f_dim, r.p, r.levels, "vanilla", r.analytic_vtr, r.counted_vtr_macs, r.reduction_pct
            ));
            out.push_str(&format!(
                "{:>6} {:>4} {:>3} {:>3} {:>9} {:>14} {:>14} {:>13.4}\n",
                r.t_len, r.f_dim, r.p, r.levels, "mstr", r.analytic_mstr, r.counted_mstr_macs, r.reduction_pct
            ));
        }
        out.push_str(&format!(
            "fitted log-log slope: vanilla {:.4}, mstr {:.4}\n",
            self.vanilla_slope, self.mstr_slope
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vtr_formula_points() {
        assert_eq!(analytic_flops_vtr(81, 8), 52_488);
        assert_eq!(analytic_flops_vtr(1, 1), 1);
        for t in [4usize, 10, 50] {
            for f in [1usize, 8, 33] {
                assert_eq!(analytic_flops_vtr(2 * t, f), 4 * analytic_flops_vtr(t, f));
            }
        }
    }

    #[test]
    fn mstr_formula_points() {
        // (81 + 27 + 9 + 3) * 3^2 * 8
        assert_eq!(analytic_flops_mstr(81, 8, 3, 4).unwrap(), 8_640);
        // L = 1: T * p^2 * F
        assert_eq!(analytic_flops_mstr(10, 4, 5, 1).unwrap(), 10 * 25 * 4);
        // Linear in T with p, L, F fixed.
        assert_eq!(
            analytic_flops_mstr(162, 8, 3, 4).unwrap(),
            2 * analytic_flops_mstr(81, 8, 3, 4).unwrap()
        );
        assert!(analytic_flops_mstr(80, 8, 3, 4).is_err());
    }

    #[test]
    fn closed_form_agrees_exactly() {
        for (t, f, p, l) in [
            (81usize, 8usize, 3usize, 4usize),
            (162, 16, 3, 4),
            (64, 4, 2, 5),
            (625, 3, 5, 4),
            (12, 7, 2, 2),
            (100, 1, 10, 2),
        ] {
            assert_eq!(
                analytic_flops_mstr(t, f, p, l).unwrap(),
                analytic_flops_mstr_closed_form(t, f, p, l).unwrap(),
                "mismatch at T={t}, F={f}, p={p}, L={l}"
            );
        }
    }

    #[test]
    fn mstr_formula_is_monotone_in_every_argument() {
        let base = analytic_flops_mstr(162, 8, 3, 4).unwrap();
        assert!(analytic_flops_mstr(324, 8, 3, 4).unwrap() >= base);
        assert!(analytic_flops_mstr(162, 9, 3, 4).unwrap() >= base);
        assert!(analytic_flops_mstr(162, 8, 3, 5).unwrap() >= base);
        // Raising p needs a fresh divisible T: compare at T divisible by both.
        let t = 3usize.pow(3) * 4usize.pow(3); // divisible by 3^3 and 4^3
        assert!(
            analytic_flops_mstr(t, 8, 4, 4).unwrap() >= analytic_flops_mstr(t, 8, 3, 4).unwrap()
        );
    }

    #[test]
    fn counted_attention_equals_analytic_for_both_variants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let mut cases = vec![
            (81usize, 8usize, 3usize, 4usize, 1usize),
            (81, 8, 3, 4, 4),
        ];
        // Randomized grid of valid shapes.
        for _ in 0..10 {
            let p = rng.random_range(2..=4usize);
            let l = rng.random_range(1..=3usize);
            let t = p.pow(l as u32) * rng.random_range(1..=4usize);
            let heads = [1usize, 2, 4][rng.random_range(0..3)];
            let f = heads * rng.random_range(1..=6usize);
            cases.push((t, f, p, l, heads));
        }
        for (t, f, p, l, heads) in cases {
            let vanilla = measure_block_macs(Variant::Vanilla, t, f, p, l, heads).unwrap();
            assert_eq!(vanilla.attention_scores, analytic_flops_vtr(t, f));
            assert_eq!(vanilla.attention_values, analytic_flops_vtr(t, f));

            let fractal = measure_block_macs(Variant::Mstr, t, f, p, l, heads).unwrap();
            let expect = analytic_flops_mstr(t, f, p, l).unwrap();
            assert_eq!(fractal.attention_scores, expect, "T={t} F={f} p={p} L={l} h={heads}");
            assert_eq!(fractal.attention_values, expect);
        }
    }

    #[test]
    fn vanilla_both_sides_double_the_single_side() {
        let counts = measure_block_macs(Variant::Vanilla, 81, 8, 3, 4, 1).unwrap();
        assert_eq!(counts.attention_scores + counts.attention_values, 104_976);
    }

    #[test]
    fn head_count_does_not_change_attention_totals() {
        let base = measure_block_macs(Variant::Mstr, 54, 12, 3, 3, 1).unwrap();
        for heads in [2usize, 3, 4, 6, 12] {
            let counts = measure_block_macs(Variant::Mstr, 54, 12, 3, 3, heads).unwrap();
            assert_eq!(counts.attention_scores, base.attention_scores);
            assert_eq!(counts.attention_values, base.attention_values);
        }
    }

    #[test]
    fn empty_run_counts_zero() {
        let tape = Tape::<f32>::new();
        let counts = ComponentMacs::from_tape(&tape).unwrap();
        assert_eq!(counts.total(), 0);
    }

    #[test]
    fn disabled_counter_is_a_contract_error() {
        let mut tape = Tape::<f32>::new();
        tape.set_counting(false);
        assert!(matches!(
            ComponentMacs::from_tape(&tape),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scaling_slopes_bracket_two_and_one() {
        let report = scaling_report(&[81, 162, 324], 8, 3, 4).unwrap();
        assert!(
            (1.95..=2.05).contains(&report.vanilla_slope),
            "vanilla slope {}",
            report.vanilla_slope
        );
        assert!(
            (0.95..=1.05).contains(&report.mstr_slope),
            "mstr slope {}",
            report.mstr_slope
        );
    }

    #[test]
    fn reduction_grows_with_length_and_hits_the_pinned_point() {
        let report = scaling_report(&[81, 162, 324], 8, 3, 4).unwrap();
        let reductions: Vec<f64> = report.rows.iter().map(|r| r.reduction_pct).collect();
        assert!(reductions.windows(2).all(|w| w[1] > w[0]));
        assert!((reductions[0] - 83.5391).abs() < 0.01, "got {}", reductions[0]);
    }

    #[test]
    fn csv_has_the_pinned_columns() {
        let report = scaling_report(&[81, 162], 8, 3, 4).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("T,F,p,L,variant,analytic,counted,reduction_pct\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
    }
}
