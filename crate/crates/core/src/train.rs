//! Mini-batch training with gradient accumulation over clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossValues;
use crate::model::{GadModel, PreparedClip, TextCache};
use crate::nn::{Adam, GradBuffer, Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch clip order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            base_lr: 1e-5,
            peak_lr: 1e-4,
            warmup_epochs: 5,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, clips: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: clips.div_ceil(self.batch_size.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule(1).validate()
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: LossValues,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,L_ind,L_group,L_mem,L_con,L_act,L_nll,total";

impl StepRecord {
    /// CSV row in [`LOSS_CSV_HEADER`] order; floats use the shortest
    /// round-trip representation.
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.lr, l.ind, l.group, l.membership, l.consistency, l.act, l.nll, l.total
        )
    }
}

/// Clip order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

pub struct Trainer<'m, S> {
    pub model: &'m GadModel,
    pub store: ParamStore<S>,
    pub adam: Adam<S>,
    pub cfg: TrainConfig,
    /// Number of optimizer steps taken so far.
    pub step: usize,
}

impl<'m, S: Scalar> Trainer<'m, S> {
    pub fn new(model: &'m GadModel, store: ParamStore<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&store, cfg.adam);
        Ok(Trainer { model, store, adam, cfg, step: 0 })
    }

    /// Clips of global step `step`.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let spe = self.cfg.schedule(n).steps_per_epoch;
        let order = epoch_order(self.cfg.seed, step / spe, n);
        let start = (step % spe) * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(n)].to_vec()
    }

    /// One optimizer step over `batch`: per-clip backward, averaged gradients,
    /// Adam update. Returns the batch-mean losses.
    pub fn train_step(&mut self, batch: &[&PreparedClip], lr: f64, cache: Option<&TextCache<S>>) -> Result<LossValues> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut grads = GradBuffer::new(&self.store);
        let mut mean = LossValues::default();
        for prep in batch {
            let mut g = Graph::new(&self.store);
            let (total, values) = self.model.clip_loss(&mut g, prep, cache)?;
            if !values.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {} on clip {}: {values:?}",
                    self.step, prep.clip.clip_id
                )));
            }
            g.backward(total)?;
            grads.accumulate(g.param_grads());
            mean.add_assign(&values);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(S::lit(inv));
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        self.adam.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(mean.scaled(inv))
    }

    /// Runs until `max_steps` total steps (or the schedule ends), calling
    /// `on_step` after each.
    pub fn run(
        &mut self,
        clips: &[PreparedClip],
        cache: Option<&TextCache<S>>,
        max_steps: Option<usize>,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::Usage("no training clips".into()));
        }
        let schedule = self.cfg.schedule(clips.len());
        let end = max_steps.map_or(schedule.total_steps(), |m| m.min(schedule.total_steps()));
        while self.step < end {
            let lr = schedule.lr_at(self.step)?;
            let idx = self.batch_indices(self.step, clips.len());
            let batch: Vec<&PreparedClip> = idx.iter().map(|&i| &clips[i]).collect();
            let step = self.step;
            let losses = self.train_step(&batch, lr, cache)?;
            on_step(&StepRecord { step, lr, losses })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(3, 1, 10);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 1, 10));
        assert_ne!(a, epoch_order(3, 2, 10));
    }

    #[test]
    fn csv_row_has_every_column() {
        let r = StepRecord { step: 3, lr: 1e-5, losses: LossValues::default() };
        assert_eq!(r.csv_row().split(',').count(), LOSS_CSV_HEADER.split(',').count());
    }
}
