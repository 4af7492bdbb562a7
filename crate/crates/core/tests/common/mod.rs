//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use dps_core::gas::GasModel;
use dps_core::graph::{NeighborSet, TemporalGraph};
use dps_core::tds::RepetitionEvent;
use rand::Rng;

/// `-Σ [λ t_v - ln Σ_w exp(λ t_w)]`, evaluated per event.
pub fn naive_nll(lambda: f64, events: &[RepetitionEvent]) -> f64 {
    events
        .iter()
        .map(|ev| {
            // ln Σ exp(λ(t_w - t_max)) via ln_1p over all but one copy of the max
            let top = ev.candidate_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let at = ev.candidate_times.iter().position(|&t| t == top).unwrap();
            let rest: f64 = ev
                .candidate_times
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != at)
                .map(|(_, &t)| (lambda * (t - top)).exp())
                .sum();
            lambda * (top - ev.prior_time) + rest.ln_1p()
        })
        .sum()
}

/// Argmin of `naive_nll` over `points` evenly spaced values in `[lo, hi]`.
pub fn grid_argmin(events: &[RepetitionEvent], lo: f64, hi: f64, points: usize) -> f64 {
    let step = (hi - lo) / (points - 1) as f64;
    let mut best = (f64::INFINITY, lo);
    for i in 0..points {
        let l = lo + step * i as f64;
        let v = naive_nll(l, events);
        if v < best.0 {
            best = (v, l);
        }
    }
    best.1
}

/// Random repetition events: the prior is drawn from the softmax of
/// `true_lambda * t` over 2..=max_cands candidate times in `[0, span)`.
pub fn random_events<R: Rng>(rng: &mut R, n: usize, max_cands: usize, span: f64, true_lambda: f64) -> Vec<RepetitionEvent> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(2..=max_cands);
            let mut times: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..span)).collect();
            times.sort_by(f64::total_cmp);
            let w: Vec<f64> = times.iter().map(|&t| (true_lambda * (t - span)).exp()).collect();
            let mut x = rng.gen::<f64>() * w.iter().sum::<f64>();
            let mut pick = k - 1;
            for (i, wi) in w.iter().enumerate() {
                if x < *wi {
                    pick = i;
                    break;
                }
                x -= wi;
            }
            RepetitionEvent { anchor_time: span, prior_time: times[pick], candidate_times: times }
        })
        .collect()
}

/// O(n²) AUC with half credit for ties.
pub fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Whether observed counts match probabilities within 3 binomial sigma.
pub fn within_3_sigma(counts: &[usize], probs: &[f64], draws: usize) -> Result<(), String> {
    for (i, (&c, &p)) in counts.iter().zip(probs).enumerate() {
        let n = draws as f64;
        let sigma = (n * p * (1.0 - p)).sqrt().max(1e-12);
        let z = (c as f64 - n * p) / sigma;
        if z.abs() > 3.0 {
            return Err(format!("cell {i}: count {c}, expected {:.1}, z = {z:.2}", n * p));
        }
    }
    Ok(())
}

/// GAS scores by explicit loops over the stored parameters.
pub fn naive_gas_scores(model: &GasModel, g: &TemporalGraph, ns: &NeighborSet) -> Vec<f64> {
    let get = |name: &str| model.store.get(model.store.id_of(name).unwrap()).clone();
    let table = get("gas.node_table");
    let omega = get("gas.time.omega");
    let (wq, wk) = (get("gas.w_q"), get("gas.w_k"));
    let d_in = wq.shape()[0];
    let d_proj = wq.shape()[1];
    let project = |w: &dps_autodiff::Tensor, x: &[f64]| -> Vec<f64> {
        (0..d_proj).map(|j| (0..d_in).map(|i| x[i] * w.data()[i * d_proj + j]).sum()).collect()
    };
    let mut anchor: Vec<f64> = table.row(ns.anchor_node).to_vec();
    anchor.extend(std::iter::repeat(1.0).take(omega.numel()));
    anchor.extend(std::iter::repeat(0.0).take(g.feature_dim()));
    let k = project(&wk, &anchor);
    ns.entries
        .iter()
        .map(|e| {
            let mut x: Vec<f64> = table.row(e.neighbor).to_vec();
            x.extend(omega.data().iter().map(|w| (w * (ns.anchor_time - e.timestamp)).cos()));
            x.extend_from_slice(g.edge_features(e.edge_id));
            let q = project(&wq, &x);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d_proj as f64).sqrt()
        })
        .collect()
}
