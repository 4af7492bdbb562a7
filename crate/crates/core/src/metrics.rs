//! Link loss, ROC AUC, accuracy and early stopping.

use dps_autodiff::{Tape, Var};

use crate::error::{DpsError, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean of `−log p_pos − log(1 − p_neg)` over row-aligned probabilities.
pub fn link_loss(tape: &mut Tape, p_pos: Var, p_neg: Var) -> Result<Var> {
    let pp = tape.clamp(p_pos, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pn = tape.clamp(p_neg, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = tape.log(pp)?;
    let one_minus = tape.affine(pn, -1.0, 1.0)?;
    let ln = tape.log(one_minus)?;
    let s = tape.add(lp, ln)?;
    let m = tape.mean_all(s)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Scalar form of [`link_loss`] for one pair.
pub fn link_loss_value(p_pos: f64, p_neg: f64) -> f64 {
    let pp = p_pos.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pn = p_neg.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(pp.ln() + (1.0 - pn).ln())
}

/// Probability that a positive outscores a negative, ties counting half,
/// computed from average ranks.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(DpsError::Contract("AUC needs at least one positive and one negative".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(DpsError::Contract("AUC got a NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        let n_pos = all[i..j].iter().filter(|(_, p)| *p).count();
        rank_sum += avg * n_pos as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Fraction of positives scored `>= threshold` and negatives below it.
pub fn accuracy(pos: &[f64], neg: &[f64], threshold: f64) -> f64 {
    let total = pos.len() + neg.len();
    if total == 0 {
        return 0.0;
    }
    let hits = pos.iter().filter(|&&p| p >= threshold).count() + neg.iter().filter(|&&p| p < threshold).count();
    hits as f64 / total as f64
}

/// Tracks the best validation score and stops after `patience` epochs
/// without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping<T> {
    patience: usize,
    best: Option<(f64, usize, T)>,
    epoch: usize,
    since_best: usize,
}

impl<T> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, epoch: 0, since_best: 0 }
    }

    /// Records one epoch's score. `snapshot` runs only on improvement.
    /// Returns `true` when training should stop.
    pub fn observe(&mut self, score: f64, snapshot: impl FnOnce() -> T) -> bool {
        let improved = match &self.best {
            None => true,
            Some((b, _, _)) => score > *b,
        };
        if improved {
            self.best = Some((score, self.epoch, snapshot()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.epoch += 1;
        self.since_best >= self.patience
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }

    pub fn into_best(self) -> Option<T> {
        self.best.map(|b| b.2)
    }
}
