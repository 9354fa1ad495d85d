//! Cross-entropy training with Adam, per-seed runs, and evaluation.
//!
//! Determinism contract: given a seed, batch order, dropout masks, and the
//! gradient reduction order are all fixed, so two runs produce identical
//! histories. Samples within a batch run in parallel; their gradients are
//! reduced sequentially in ascending sample order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{batch_iter, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{argmax, compute_metrics, EvalMetrics};
use crate::model::{
    init_params, register_params, ModelParams, MstrConfig,
};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            seeds: (0..5).collect(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.seeds.is_empty() {
            return Err(Error::config(
                "epochs, batch_size, and seeds must all be nonempty/nonzero",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must be in [0, 1)"));
        }
        Ok(())
    }
}

/// First/second moment estimates for one flat parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[&Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, slot: usize) -> (&Tensor<S>, &Tensor<S>) {
        (&self.m[slot], &self.v[slot])
    }
}

/// One Adam update with bias correction over a flat parameter list.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "adam_step: parameter {i} is {:?}, gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let b1 = S::from_f64_lossy(beta1);
    let b2 = S::from_f64_lossy(beta2);
    let one = S::one();
    let lr_s = S::from_f64_lossy(lr);
    let eps_s = S::from_f64_lossy(eps);
    let bias1 = one - S::from_f64_lossy(beta1.powi(state.t as i32));
    let bias2 = one - S::from_f64_lossy(beta2.powi(state.t as i32));

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((pi, &gi), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *pi -= lr_s * m_hat / (v_hat.sqrt() + eps_s);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_wa: f64,
    pub val_ua: f64,
    pub val_wf1: f64,
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: EvalMetrics,
    pub best_params: ModelParams<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub runs: Vec<SeedRun>,
}

impl TrainOutcome {
    pub fn all_records(&self) -> Vec<EpochRecord> {
        self.runs.iter().flat_map(|r| r.history.clone()).collect()
    }
}

fn mix_seed(seed: u64, salt: u64, index: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss plus flat parameter gradients when training.
type SamplePass = (f64, Option<Vec<Tensor<f32>>>);

/// Forward + loss (+ gradients when training) for one sample.
fn sample_pass(
    params: &ModelParams<f32>,
    config: &MstrConfig,
    sample: &Sample,
    dropout_seed: Option<u64>,
) -> Result<SamplePass> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params);
    let x = tape.leaf(sample.features.clone());
    let logits = match dropout_seed {
        Some(ds) if config.dropout_rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(ds);
            crate::model::model_forward_impl(
                &mut tape,
                x,
                sample.valid_len,
                &ids,
                config,
                Some(crate::model::DropoutCtx {
                    rate: config.dropout_rate,
                    rng: &mut rng,
                }),
            )?
        }
        _ => crate::model::model_forward(&mut tape, x, sample.valid_len, &ids, config)?,
    };
    let loss_node = tape.cross_entropy(logits, sample.label)?;
    let loss = tape.value(loss_node).get(0, 0) as f64;
    if dropout_seed.is_none() {
        return Ok((loss, None));
    }
    let grads = tape.backward(loss_node)?;
    let flat = ids
        .flat()
        .into_iter()
        .map(|id| grads.get(id).expect("registered parameter").clone())
        .collect();
    Ok((loss, Some(flat)))
}

/// Trains one model per seed; keeps the best-validation-WA parameters.
pub fn train(
    model_cfg: &MstrConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut config = model_cfg.clone();
    config.dropout_rate = train_cfg.dropout_rate;
    config.validate()?;

    let mut runs = Vec::with_capacity(train_cfg.seeds.len());
    for &seed in &train_cfg.seeds {
        runs.push(train_one_seed(&config, train_cfg, dataset, seed)?);
    }
    Ok(TrainOutcome { runs })
}

fn train_one_seed(
    config: &MstrConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<SeedRun> {
    let mut params = init_params::<f32>(config, seed)?;
    let mut state = AdamState::new(&params.flat());
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, EvalMetrics, ModelParams<f32>)> = None;

    for epoch in 0..train_cfg.epochs {
        let batches = batch_iter(
            dataset.train.len(),
            train_cfg.batch_size,
            mix_seed(seed, 0xBA7C4, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for (batch_idx, batch) in batches.iter().enumerate() {
            // Per-sample passes run in parallel; reduction below is
            // sequential in ascending batch position.
            let passes: Vec<Result<SamplePass>> = batch
                .par_iter()
                .map(|&sample_idx| {
                    let sample = &dataset.train[sample_idx];
                    let dropout_seed = mix_seed(seed, 0xD80F, sample_idx as u64)
                        ^ mix_seed(seed, 0xE90C, epoch as u64);
                    sample_pass(&params, config, sample, Some(dropout_seed))
                })
                .collect();

            let mut mean_grads: Option<Vec<Tensor<f32>>> = None;
            for pass in passes {
                let (loss, grads) = pass?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        seed,
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += loss;
                loss_count += 1;
                let grads = grads.expect("training pass returns gradients");
                match &mut mean_grads {
                    None => mean_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut mean_grads = mean_grads.expect("nonempty batch");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut mean_grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            adam_step(
                &mut params.flat_mut(),
                &mean_grads,
                &mut state,
                train_cfg.learning_rate,
                train_cfg.adam_beta1,
                train_cfg.adam_beta2,
                train_cfg.adam_eps,
            )?;
        }

        let val_split: &[Sample] = if dataset.val.is_empty() {
            &dataset.train
        } else {
            &dataset.val
        };
        let val = evaluate(&params, val_split, config)?;
        history.push(EpochRecord {
            seed,
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_wa: val.wa,
            val_ua: val.ua,
            val_wf1: val.wf1,
        });
        let improved = best.as_ref().is_none_or(|(_, b, _)| val.wa > b.wa);
        if improved {
            best = Some((epoch, val, params.clone()));
        }
    }

    let (best_epoch, best_val, best_params) = best.expect("at least one epoch");
    Ok(SeedRun {
        seed,
        history,
        best_epoch,
        best_val,
        best_params,
    })
}

/// Deterministic evaluation of fixed parameters on a split.
pub fn evaluate(
    params: &ModelParams<f32>,
    samples: &[Sample],
    config: &MstrConfig,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let pairs: Vec<Result<(usize, usize)>> = samples
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, params);
            let x = tape.leaf(sample.features.clone());
            let logits = crate::model::model_forward(&mut tape, x, sample.valid_len, &ids, config)?;
            Ok((sample.label, argmax(tape.value(logits).row(0))))
        })
        .collect();
    let pairs: Result<Vec<(usize, usize)>> = pairs.into_iter().collect();
    compute_metrics(&pairs?, config.num_classes)
}

/// Mean cross-entropy of fixed parameters on a split, no updates.
pub fn mean_loss(
    params: &ModelParams<f32>,
    samples: &[Sample],
    config: &MstrConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("loss evaluation split"));
    }
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| sample_pass(params, config, s, None).map(|(l, _)| l))
        .collect();
    let losses: Result<Vec<f64>> = losses.into_iter().collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// History CSV: `seed,epoch,train_loss,val_wa,val_ua,val_wf1`.
pub fn write_history_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("seed,epoch,train_loss,val_wa,val_ua,val_wf1\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.seed, r.epoch, r.train_loss, r.val_wa, r.val_ua, r.val_wf1
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
