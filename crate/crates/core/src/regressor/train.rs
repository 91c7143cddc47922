//! Mini-batch Adam training with validation-MeanIoU checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{accumulate_gradient, forward_trace, huber_loss, Dims, RegressorParams, Trace};
use super::{EmbeddingRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{mean_iou, NormBox};

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            lr: cfg.learning_rate,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut RegressorParams, grad: &RegressorParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the full training set after the epoch's updates.
    pub train_loss: f64,
    pub train_mean_iou: f64,
    pub val_mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: RegressorParams,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_mean_iou: f64,
    pub train_loss: f64,
}

impl Checkpoint {
    pub fn dims(&self) -> Dims {
        self.params.dims()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn target_of(r: &EmbeddingRecord) -> Result<[f64; 4]> {
    r.target
        .map(|t| t.to_array())
        .ok_or_else(|| Error::validation(format!("record {} has no target box", r.qa_id)))
}

fn check_records(records: &[EmbeddingRecord], dims: (usize, usize), what: &str) -> Result<()> {
    for r in records {
        if (r.visual.len(), r.text.len()) != dims {
            return Err(Error::config(format!(
                "{what} record {} has dims ({}, {}), expected {dims:?}",
                r.qa_id,
                r.visual.len(),
                r.text.len()
            )));
        }
        if r.visual.iter().chain(&r.text).any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{what} record {} has non-finite values", r.qa_id)));
        }
        target_of(r)?;
    }
    Ok(())
}

/// Mean loss and MeanIoU of `params` over `records`, summed in record order.
fn evaluate(params: &RegressorParams, records: &[EmbeddingRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut pairs: Vec<(NormBox, NormBox)> = Vec::with_capacity(records.len());
    for r in records {
        let tr = forward_trace(params, &r.visual, &r.text).expect("dims checked");
        let target = r.target.expect("targets checked");
        loss += huber_loss(&tr.ordered(), &target.to_array());
        pairs.push((tr.bbox(), target));
    }
    let miou = mean_iou(pairs.iter().map(|(p, g)| (Some(p), g)));
    (loss / records.len() as f64, miou)
}

/// Trains a fresh regressor on `records`, keeping the epoch with the best
/// validation MeanIoU (earliest on ties). With an empty `val` set the
/// training MeanIoU is used for selection instead.
pub fn train(records: &[EmbeddingRecord], val: &[EmbeddingRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = records
        .first()
        .ok_or_else(|| Error::config("no training records"))?;
    let io_dims = (first.visual.len(), first.text.len());
    check_records(records, io_dims, "training")?;
    check_records(val, io_dims, "validation")?;

    let dims = Dims {
        visual: io_dims.0,
        text: io_dims.1,
        latent: cfg.latent,
        hidden: cfg.hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = RegressorParams::init(dims, &mut rng);
    let mut adam = Adam::new(params.len(), cfg);
    let mut grad = RegressorParams::zeros(dims);
    let mut trace = Trace::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let targets: Vec<[f64; 4]> = records.iter().map(target_of).collect::<Result<_>>()?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.values_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let r = &records[i];
                batch_loss += accumulate_gradient(&params, &r.visual, &r.text, &targets[i], &mut grad, &mut trace);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.values_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.update(&mut params, &grad);
            if !params.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                });
            }
        }

        let (train_loss, train_mean_iou) = evaluate(&params, records);
        let val_mean_iou = if val.is_empty() {
            train_mean_iou
        } else {
            evaluate(&params, val).1
        };
        log::debug!("epoch {epoch}: loss {train_loss:.6} train IoU {train_mean_iou:.4} val IoU {val_mean_iou:.4}");
        history.push(EpochStats {
            epoch,
            train_loss,
            train_mean_iou,
            val_mean_iou,
        });
        if best.as_ref().is_none_or(|b| val_mean_iou > b.val_mean_iou) {
            best = Some(Checkpoint {
                params: params.clone(),
                config: cfg.clone(),
                epoch,
                val_mean_iou,
                train_loss,
            });
        }
    }

    Ok(TrainOutcome {
        checkpoint: best.expect("epochs >= 1"),
        history,
    })
}

pub fn predict(ckpt: &Checkpoint, rec: &EmbeddingRecord) -> Result<NormBox> {
    super::model::forward(&ckpt.params, &rec.visual, &rec.text)
}
