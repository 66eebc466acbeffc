use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, sgd_step, AdamState, Mlp};
use crate::dataset::SupervisedSet;
use crate::error::{Error, Result};
use crate::physics::{composite_loss, composite_loss_grad, CompositeLossConfig, LossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the epoch's mean training loss falls to this value.
    #[serde(default)]
    pub loss_threshold: Option<f64>,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            loss_threshold: None,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (R1 uses consecutive pairs)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch losses seen during the epoch.
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// CSV with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,train_l_data,train_r1,train_r2,train_total,val_l_data,val_r1,val_r2,val_total\n",
        );
        for e in &self.epochs {
            let v = e.val.unwrap_or(LossBreakdown {
                l_data: f64::NAN,
                r1: f64::NAN,
                r2: f64::NAN,
                total: f64::NAN,
            });
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch, e.train.l_data, e.train.r1, e.train.r2, e.train.total, v.l_data, v.r1, v.r2, v.total
            ));
        }
        s
    }
}

/// Splits each contiguous segment into windows of at most `batch_size` rows.
/// A trailing single row is merged into the previous window so every window
/// has at least one consecutive pair.
pub fn segment_windows(set: &SupervisedSet, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for seg in set.segments() {
        let first = out.len();
        let mut start = seg.start;
        while start < seg.end {
            let end = (start + batch_size).min(seg.end);
            if end - start == 1 && out.len() > first {
                out.last_mut().expect("window in this segment").end = end;
            } else {
                out.push(start..end);
            }
            start = end;
        }
    }
    out
}

/// Windows for one epoch, shuffled at window granularity.
pub fn epoch_windows(set: &SupervisedSet, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Range<usize>> {
    let mut w = segment_windows(set, batch_size);
    w.shuffle(rng);
    w
}

/// Composite loss over a whole set, evaluated per contiguous segment.
pub fn evaluate_loss(model: &Mlp, set: &SupervisedSet, loss: &CompositeLossConfig) -> Result<LossBreakdown> {
    let pred = model.predict(&set.x)?;
    composite_loss(&pred, &set.y, &set.segments(), loss)
}

/// Minibatch training on the composite loss. Batches are contiguous time
/// windows; window order is reshuffled each epoch from `cfg.seed`.
pub fn train(
    model: &Mlp,
    data: &SupervisedSet,
    val: Option<&SupervisedSet>,
    loss: &CompositeLossConfig,
    cfg: &TrainConfig,
) -> Result<(Mlp, TrainingLog)> {
    cfg.validate()?;
    loss.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.x.cols() != model.input_dim() || data.y.cols() != model.output_dim() {
        return Err(Error::shape(
            "train data",
            format!("{}->{}", model.input_dim(), model.output_dim()),
            format!("{}->{}", data.x.cols(), data.y.cols()),
        ));
    }
    let mut model = model.clone();
    let mut log = TrainingLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model);

    for epoch in 0..cfg.epochs {
        let windows = epoch_windows(data, cfg.batch_size, &mut rng);
        let mut sum = LossBreakdown::default();
        for w in &windows {
            let x = data.x.slice_rows(w.clone());
            let y = data.y.slice_rows(w.clone());
            let local = [0..w.len()];
            let trace = model.forward(&x)?;
            let pred = trace.outputs();
            let b = composite_loss(pred, &y, &local, loss)?;
            if !b.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            sum.l_data += b.l_data;
            sum.r1 += b.r1;
            sum.r2 += b.r2;
            sum.total += b.total;
            let dy = composite_loss_grad(pred, &y, &local, loss)?;
            let grads = model.backward(&trace, &dy)?;
            match cfg.optimizer {
                Optimizer::Adam => adam_step(&mut model, &grads, &mut adam, cfg.learning_rate)?,
                Optimizer::Sgd => sgd_step(&mut model, &grads, cfg.learning_rate)?,
            }
        }
        if !model.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let k = windows.len().max(1) as f64;
        let train_b = LossBreakdown {
            l_data: sum.l_data / k,
            r1: sum.r1 / k,
            r2: sum.r2 / k,
            total: sum.total / k,
        };
        let val_b = match val {
            Some(v) if !v.is_empty() => {
                let b = evaluate_loss(&model, v, loss)?;
                if !b.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                Some(b)
            }
            _ => None,
        };
        log::debug!("epoch {epoch}: train {:.6} val {:?}", train_b.total, val_b.map(|b| b.total));
        log.epochs.push(EpochRecord {
            epoch,
            train: train_b,
            val: val_b,
        });
        if cfg.loss_threshold.is_some_and(|t| train_b.total <= t) {
            log.stopped_early = true;
            break;
        }
    }
    Ok((model, log))
}

/// Continues training a pruned model with its original objective. Masks are
/// honoured by the optimizer; Adam moments start fresh.
pub fn fine_tune(
    model: &Mlp,
    data: &SupervisedSet,
    val: Option<&SupervisedSet>,
    loss: &CompositeLossConfig,
    cfg: &TrainConfig,
) -> Result<(Mlp, TrainingLog)> {
    train(model, data, val, loss, cfg)
}
