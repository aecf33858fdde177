//! Pieces shared by both trainers: shuffled minibatches, early stopping,
//! and the per-epoch log.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ops::Rng;

/// Shuffle `0..n` and cut it into batches of `batch_size`. A trailing
/// batch shorter than `min_batch` is merged into the one before it.
pub fn shuffled_batches(n: usize, batch_size: usize, min_batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < min_batch) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

/// Patience counter on a validation loss. Equal losses do not count as an
/// improvement, so ties keep the earlier checkpoint.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_checks: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_checks: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_checks = 0;
            Verdict::Improved
        } else {
            self.bad_checks += 1;
            if self.bad_checks >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Waiting
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Only present on epochs where validation ran.
    pub val_loss: Option<f64>,
    /// Regularizer value on the validation split (orthogonality penalty or KL).
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,penalty\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.penalty)
            )
            .unwrap();
        }
        out
    }

    pub fn val_losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.epochs.iter().filter_map(|e| e.val_loss)
    }
}
