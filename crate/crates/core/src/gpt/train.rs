use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::Gpt;
use super::real::Real;
use crate::corpus::TrainingPair;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training cross-entropy (dropout active).
    pub loss: f64,
    /// Training next-token accuracy.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub epochs: Vec<EpochStats>,
    pub wall_ms: u64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Adam<R> {
    m: Vec<R>,
    v: Vec<R>,
    step: i32,
}

impl<R: Real> Adam<R> {
    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![R::zero(); n],
            v: vec![R::zero(); n],
            step: 0,
        }
    }

    pub(crate) fn update(&mut self, params: &mut [R], grads: &[R], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, b1, b2, eps) = (R::lit(lr), R::lit(b1), R::lit(b2), R::lit(eps));
        let (c1, c2) = (R::lit(c1), R::lit(c2));
        let one = R::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Stateful epoch-by-epoch trainer.
pub struct Trainer<R: Real> {
    model: Gpt<R>,
    adam: Adam<R>,
    epoch: usize,
    exec: Execution,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: Gpt<R>, exec: Execution) -> Self {
        let n = model.param_count();
        Trainer {
            model,
            adam: Adam::new(n),
            epoch: 0,
            exec,
        }
    }

    pub fn model(&self) -> &Gpt<R> {
        &self.model
    }

    pub fn into_model(self) -> Gpt<R> {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `pairs` in a seeded shuffled order.
    pub fn run_epoch(&mut self, pairs: &[TrainingPair]) -> Result<EpochStats> {
        if pairs.is_empty() {
            return Err(Error::config("no training pairs"));
        }
        let epoch = self.epoch + 1;
        let cfg = self.model.config().clone();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, &[1, epoch as u64]));

        let frozen = if cfg.freeze_embeddings {
            self.model.layout().wpe.end
        } else {
            0
        };
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let micro: Vec<&[usize]> = batch_idx.chunks(cfg.micro_batch).collect();
            let model = &self.model;
            let parts = par::try_map_range(self.exec, micro.len(), |mi| {
                let batch: Vec<TrainingPair> =
                    micro[mi].iter().map(|&i| pairs[i].clone()).collect();
                let (tokens, targets) = model.flatten(&batch)?;
                let mut grads = vec![R::zero(); model.param_count()];
                let mut drop_rng =
                    rng::substream(cfg.seed, &[2, epoch as u64, bi as u64, mi as u64]);
                let (l, c) =
                    model.accumulate_gradient(&tokens, &targets, Some(&mut drop_rng), &mut grads);
                Ok::<_, Error>((l, c, grads))
            })?;
            let mut iter = parts.into_iter();
            let (l0, c0, mut grads) = iter.next().expect("non-empty batch");
            let mut batch_loss = l0.f64();
            correct += c0;
            for (l, c, g) in iter {
                batch_loss += l.f64();
                correct += c;
                grads.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += batch_loss;
            let scale = R::one() / R::lit(batch_idx.len() as f64);
            grads.iter_mut().for_each(|g| *g *= scale);
            let params = self.model.params_mut();
            self.adam.update(
                &mut params[frozen..],
                &grads[frozen..],
                cfg.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            );
        }
        if !self.model.all_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        self.epoch = epoch;
        Ok(EpochStats {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            accuracy: correct as f64 / pairs.len() as f64,
        })
    }
}

/// Trains for `model.config().epochs` epochs. `on_epoch` runs after every
/// epoch (used for periodic checkpoints and learning curves).
pub fn train<R: Real>(
    model: Gpt<R>,
    pairs: &[TrainingPair],
    phase: Phase,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochStats, &Gpt<R>) -> Result<()>,
) -> Result<(Gpt<R>, TrainReport)> {
    let start = Instant::now();
    let epochs = model.config().epochs;
    let mut trainer = Trainer::new(model, exec);
    let mut stats = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let s = trainer.run_epoch(pairs)?;
        log::debug!("epoch {} loss {:.4} acc {:.4}", s.epoch, s.loss, s.accuracy);
        on_epoch(&s, trainer.model())?;
        stats.push(s);
    }
    Ok((
        trainer.into_model(),
        TrainReport {
            phase,
            epochs: stats,
            wall_ms: start.elapsed().as_millis() as u64,
            checkpoint: None,
        },
    ))
}

/// Eval-mode mean loss and next-token accuracy over `pairs`.
pub fn evaluate<R: Real>(model: &Gpt<R>, pairs: &[TrainingPair], exec: Execution) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::config("no pairs to evaluate"));
    }
    const CHUNK: usize = 256;
    let chunks: Vec<&[TrainingPair]> = pairs.chunks(CHUNK).collect();
    let parts = par::try_map_range(exec, chunks.len(), |i| {
        let (tokens, targets) = model.flatten(chunks[i])?;
        let fwd = model.forward_pass(&tokens, false, None);
        let (l, c) = Gpt::<R>::loss_sum(&fwd.logits, &targets, model.vocab_size());
        Ok::<_, Error>((l.f64(), c))
    })?;
    let (loss, correct) = parts
        .into_iter()
        .fold((0.0, 0), |(l, c), (a, b)| (l + a, c + b));
    Ok((loss / pairs.len() as f64, correct as f64 / pairs.len() as f64))
}
