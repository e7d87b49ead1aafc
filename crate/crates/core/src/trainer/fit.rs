use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, AdamConfig, OptimizerState};
use crate::corpus::{batch_iter, Batch, ExampleRecord};
use crate::error::{Error, Result};
use crate::model::{ExampleInput, Model};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Iterations between validation passes (one also runs at every epoch end).
    pub eval_interval: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Stop once an end-of-epoch validation loss falls below this.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 5e-4,
            decay_every: 5,
            decay_factor: 0.8,
            epochs: 30,
            batch_size: 128,
            eval_interval: 3000,
            seed: 0,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("decay_factor", self.decay_factor),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("decay_every", self.decay_every),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if let Some(t) = self.stop_below {
            if !(t > 0.0) {
                return Err(Error::Parameter(format!("stop_below must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// `initial_lr · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Mean token loss of every training iteration, in order.
    pub iteration_losses: Vec<f64>,
    /// Parameters at the lowest validation loss.
    pub best_params: ParamStore,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    pub epochs_run: usize,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iteration,epoch,lr,train_loss,val_loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.epoch, r.lr, r.train_loss, r.val_loss);
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

/// At most this many partial gradients are reduced per batch, whatever the
/// thread count, so summation order is fixed.
const MAX_SHARDS: usize = 8;

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn target_tokens(r: &ExampleRecord) -> usize {
    r.target.len() - 1
}

/// Token-mean loss and its gradient over a batch.
pub fn batch_gradients(
    model: &Model,
    records: &[ExampleRecord],
    batch: &Batch,
    training: bool,
    seed: u64,
) -> Result<(f64, ParamGrads)> {
    let total: usize = batch.indices.iter().map(|&i| target_tokens(&records[i])).sum();
    let shard = batch.indices.len().div_ceil(MAX_SHARDS).max(1);
    let parts: Vec<Result<(f64, ParamGrads)>> = batch
        .indices
        .par_chunks(shard)
        .map(|idx| {
            let mut grads = ParamGrads::zeros(&model.params);
            let mut nll = 0.0;
            for &i in idx {
                let r = &records[i];
                let mut s = model.session(training, mix_seed(seed, i as u64, 1));
                let loss = model.caption_nll(&mut s, ExampleInput::from(r), &r.target)?;
                nll += s.tape.value(loss)[0];
                s.accumulate_grads(loss, 1.0, &mut grads)?;
            }
            Ok((nll, grads))
        })
        .collect();
    let mut total_nll = 0.0;
    let mut grads: Option<ParamGrads> = None;
    for part in parts {
        let (nll, g) = part?;
        total_nll += nll;
        match &mut grads {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    let mut grads = grads.unwrap_or_else(|| ParamGrads::zeros(&model.params));
    grads.scale(1.0 / total as f64);
    Ok((total_nll / total as f64, grads))
}

/// Token-mean cross-entropy of `records` in eval mode.
pub fn evaluate_loss(model: &Model, records: &[ExampleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let shard = records.len().div_ceil(MAX_SHARDS * 4).max(1);
    let parts: Vec<Result<f64>> = records
        .par_chunks(shard)
        .map(|chunk| {
            let mut nll = 0.0;
            for r in chunk {
                let mut s = model.session(false, 0);
                let loss = model.caption_nll(&mut s, ExampleInput::from(r), &r.target)?;
                nll += s.tape.value(loss)[0];
            }
            Ok(nll)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    let tokens: usize = records.iter().map(target_tokens).sum();
    Ok(total / tokens as f64)
}

/// Teacher-forced training with Adam, stepped decay and gradient clipping.
/// `val` falls back to `train` when empty.
pub fn fit(model: &mut Model, train: &[ExampleRecord], val: &[ExampleRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let mut opt = OptimizerState::new(&model.params, cfg.adam);
    let mut report = TrainReport {
        log: Vec::new(),
        iteration_losses: Vec::new(),
        best_params: model.params.clone(),
        best_val_loss: f64::INFINITY,
        best_iteration: 0,
        epochs_run: 0,
    };
    let mut iteration = 0;
    let mut since_log = (0.0, 0usize);
    'epochs: for epoch in 0..cfg.epochs {
        report.epochs_run = epoch + 1;
        let lr = lr_at(epoch, cfg);
        let batches: Vec<Batch> = batch_iter(train, cfg.batch_size, Some(mix_seed(cfg.seed, epoch as u64, 2))).collect();
        let n_batches = batches.len();
        for (b, batch) in batches.into_iter().enumerate() {
            let (loss, mut grads) = batch_gradients(model, train, &batch, true, mix_seed(cfg.seed, iteration as u64, 3))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss is {loss} at iteration {iteration}")));
            }
            grads.clip_global_norm(cfg.clip_norm);
            adam_step(&mut model.params, &grads, &mut opt, lr)?;
            iteration += 1;
            report.iteration_losses.push(loss);
            since_log.0 += loss;
            since_log.1 += 1;

            let epoch_end = b + 1 == n_batches;
            if iteration % cfg.eval_interval == 0 || epoch_end {
                let val_loss = evaluate_loss(model, val)?;
                let row = LogRow {
                    iteration,
                    epoch,
                    lr,
                    train_loss: since_log.0 / since_log.1 as f64,
                    val_loss,
                };
                log::info!(
                    "iter {} epoch {} lr {:.3e} train {:.4} val {:.4}",
                    row.iteration,
                    row.epoch,
                    row.lr,
                    row.train_loss,
                    row.val_loss
                );
                report.log.push(row);
                since_log = (0.0, 0);
                if val_loss < report.best_val_loss {
                    report.best_val_loss = val_loss;
                    report.best_iteration = iteration;
                    report.best_params = model.params.clone();
                }
                if epoch_end && cfg.stop_below.is_some_and(|t| val_loss < t) {
                    break 'epochs;
                }
            }
        }
    }
    Ok(report)
}
