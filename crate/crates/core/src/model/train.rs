//! Minibatch training: per-sample tapes evaluated in parallel, gradients
//! summed in sample order, global-norm clipping, Adam, plateau decay and
//! early stopping on validation loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::Confusion;
use super::{AlignMamba, Head, LossParts, ModelError};
use crate::data::{Dataset, Label, MultimodalSample, Split};
use crate::params::ParamStore;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global gradient norm cap.
    pub clip_norm: f64,
    /// Stop after this many epochs without a validation-loss improvement.
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            clip_norm: 1.0,
            early_stop_patience: 10,
            plateau_factor: 0.5,
            plateau_patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be > 0");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("train.plateau_factor must be in (0, 1]");
        }
        Ok(())
    }
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value().len()])
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in store.value_mut(id).iter_mut().enumerate() {
                let g = grads[k][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss_task: f64,
    pub loss_ot: f64,
    pub loss_mmd: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss_task,loss_ot,loss_mmd,accuracy";

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<(), ModelError> {
    let io = |e: csv::Error| ModelError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>, ModelError> {
    let io = |e: csv::Error| ModelError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header: Vec<String> = r
        .headers()
        .map_err(io)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != METRICS_HEADER {
        return Err(ModelError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unexpected header {header:?}"),
            ),
        });
    }
    r.deserialize().collect::<Result<_, _>>().map_err(io)
}

/// Eval-mode results over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Means over samples of the unweighted terms.
    pub loss_task: f64,
    pub loss_ot: f64,
    pub loss_mmd: f64,
    /// `loss_task + lambda_ot * loss_ot + lambda_mmd * loss_mmd`.
    pub loss_total: f64,
    /// For regression: agreement of signs.
    pub accuracy: f64,
    pub f1: f64,
    pub predictions: Vec<Label>,
}

/// Runs the model without dropout over `samples`.
pub fn evaluate(
    model: &AlignMamba,
    samples: &[&MultimodalSample],
) -> Result<EvalResult, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptySplit("evaluation"));
    }
    let p = model.store.bind();
    let rows: Vec<(LossParts, Label)> = samples
        .par_iter()
        .map(|s| {
            let f = model.forward(&p, s, None)?;
            Ok((model.loss_parts(&f, s.label)?, model.decide(&f.output)))
        })
        .collect::<Result<_, ModelError>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&LossParts) -> f64| rows.iter().map(|(l, _)| f(l)).sum::<f64>() / n;
    let (loss_task, loss_ot, loss_mmd) = (mean(|l| l.task), mean(|l| l.ot), mean(|l| l.mmd));
    let a = &model.config.align;
    let confusion = match model.config.head {
        Head::Classification(c) => Confusion::from_pairs(
            c,
            samples
                .iter()
                .zip(&rows)
                .map(|(s, (_, pred))| (s.label.class().unwrap(), pred.class().unwrap())),
        ),
        Head::Regression => Confusion::from_pairs(
            2,
            samples.iter().zip(&rows).map(|(s, (_, pred))| {
                (
                    (s.label.value() > 0.0) as usize,
                    (pred.value() > 0.0) as usize,
                )
            }),
        ),
    };
    Ok(EvalResult {
        loss_task,
        loss_ot,
        loss_mmd,
        loss_total: loss_task + a.lambda_ot * loss_ot + a.lambda_mmd * loss_mmd,
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        predictions: rows.into_iter().map(|(_, l)| l).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Train and validation rows per epoch; epoch 0 is before any update.
    pub metrics: Vec<EpochMetrics>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
}

fn row(epoch: usize, split: Split, e: &EvalResult) -> EpochMetrics {
    EpochMetrics {
        epoch,
        split,
        loss_task: e.loss_task,
        loss_ot: e.loss_ot,
        loss_mmd: e.loss_mmd,
        accuracy: e.accuracy,
    }
}

/// Mean gradient of the total loss over `batch`, in parameter order.
fn batch_gradient(
    model: &AlignMamba,
    samples: &[&MultimodalSample],
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let per_sample: Vec<Vec<Vec<f64>>> = batch
        .par_iter()
        .map(|&i| {
            let tape = Tape::new();
            let p = model.store.bind_on(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((epoch as u64) << 32) | i as u64);
            let s = samples[i];
            let f = model.forward(&p, s, Some(&mut rng))?;
            let loss = model.total_loss(&f, s.label)?;
            let g = tape.backward(&loss)?;
            Ok(p.tensors()
                .iter()
                .map(|t| g.get(t).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    let mut sum = per_sample[0].clone();
    for g in &per_sample[1..] {
        for (acc, v) in sum.iter_mut().zip(g) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    sum.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok(sum)
}

pub fn train(
    model: &mut AlignMamba,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    train_with(model, ds, cfg, |_| {})
}

/// Trains in place and keeps the final parameters. `log` sees each metrics
/// row as it is produced.
pub fn train_with(
    model: &mut AlignMamba,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochMetrics),
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if ds.modalities != model.config.modalities {
        return Err(ModelError::Config(
            "model.modalities differ from the dataset's modalities".into(),
        ));
    }
    let train_set = ds.split(Split::Train);
    let val_set = ds.split(Split::Val);
    if train_set.is_empty() {
        return Err(ModelError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(ModelError::EmptySplit("val"));
    }

    let mut metrics = Vec::new();
    let mut record = |epoch: usize, tr: &EvalResult, va: &EvalResult| {
        for r in [row(epoch, Split::Train, tr), row(epoch, Split::Val, va)] {
            log(&r);
            metrics.push(r);
        }
    };
    let val0 = evaluate(model, &val_set)?;
    record(0, &evaluate(model, &train_set)?, &val0);

    let mut adam = Adam::new(&model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut lr = cfg.lr;
    let mut best = val0.loss_total;
    let (mut since_best, mut plateau) = (0, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = batch_gradient(model, &train_set, batch, cfg.seed, epoch)?;
            if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(ModelError::NonFiniteGradient {
                    param: names[k].clone(),
                });
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.store, &grads, lr);
        }
        epochs_run = epoch;
        let tr = evaluate(model, &train_set)?;
        let va = evaluate(model, &val_set)?;
        if !va.loss_total.is_finite() {
            return Err(ModelError::NonFiniteLoss(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        record(epoch, &tr, &va);

        if va.loss_total < best - 1e-4 * best.abs() {
            best = va.loss_total;
            since_best = 0;
            plateau = 0;
        } else {
            since_best += 1;
            plateau += 1;
            if plateau > cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                plateau = 0;
            }
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        metrics,
        epochs_run,
        stopped_early,
        final_lr: lr,
    })
}
