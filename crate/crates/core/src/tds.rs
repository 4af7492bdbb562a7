//! Time-decay sampling: per-node exponential decay rates fitted by maximum
//! likelihood on repeated interactions, and neighbor sampling from the
//! resulting categorical distribution `p(t_k) ∝ exp(λ_u t_k)`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpsError, Result};
use crate::graph::{AdjEntry, ChronoSplit, NeighborSet, NodeId, TemporalGraph};
use crate::par::{item_seed, map_range, Execution};

pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 100.0;
pub const DEFAULT_EVENT_BUDGET: usize = 100;
/// Golden-section stopping width.
pub const SEARCH_TOLERANCE: f64 = 1e-6;

/// A repeated interaction: the partner was last seen at `prior_time`, and
/// `candidate_times` are all of the node's interactions before `anchor_time`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepetitionEvent {
    pub anchor_time: f64,
    pub prior_time: f64,
    pub candidate_times: Vec<f64>,
}

/// Event without materialized candidates: they are the first `prefix`
/// entries of the node's history.
#[derive(Clone, Copy, Debug)]
struct EventRef {
    anchor_time: f64,
    prior_time: f64,
    prefix: usize,
}

fn event_refs(history: &[AdjEntry]) -> Vec<EventRef> {
    let mut latest: HashMap<NodeId, f64> = HashMap::new();
    let mut refs = Vec::new();
    let mut i = 0;
    while i < history.len() {
        // entries sharing a timestamp only see strictly earlier ones
        let t = history[i].timestamp;
        let mut j = i;
        while j < history.len() && history[j].timestamp == t {
            if let Some(&prior) = latest.get(&history[j].neighbor) {
                refs.push(EventRef {
                    anchor_time: t,
                    prior_time: prior,
                    prefix: i,
                });
            }
            j += 1;
        }
        for e in &history[i..j] {
            latest.insert(e.neighbor, e.timestamp);
        }
        i = j;
    }
    refs
}

fn materialize(history: &[AdjEntry], r: &EventRef) -> RepetitionEvent {
    RepetitionEvent {
        anchor_time: r.anchor_time,
        prior_time: r.prior_time,
        candidate_times: history[..r.prefix].iter().map(|e| e.timestamp).collect(),
    }
}

/// Repetition events over a chronologically sorted history.
pub fn repetition_events_in(history: &[AdjEntry]) -> Vec<RepetitionEvent> {
    event_refs(history).iter().map(|r| materialize(history, r)).collect()
}

pub fn repetition_events(g: &TemporalGraph, u: NodeId) -> Vec<RepetitionEvent> {
    repetition_events_in(g.adjacency(u))
}

/// `-log p(prior)` for one event, computed relative to the prior's time.
fn event_nll(lambda: f64, ev: &RepetitionEvent) -> f64 {
    let tv = ev.prior_time;
    let mut max = f64::NEG_INFINITY;
    let mut arg = 0;
    for (k, &t) in ev.candidate_times.iter().enumerate() {
        let x = lambda * (t - tv);
        if x > max {
            max = x;
            arg = k;
        }
    }
    let rest: f64 = ev
        .candidate_times
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != arg)
        .map(|(_, &t)| (lambda * (t - tv) - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Negative log-likelihood `−Σ [λ t_v − logsumexp(λ t_w)]` over `events`.
pub fn tds_nll(lambda: f64, events: &[RepetitionEvent]) -> Result<f64> {
    if events.is_empty() {
        return Err(DpsError::Contract("tds_nll needs at least one event".into()));
    }
    Ok(nll_unchecked(lambda, events))
}

fn nll_unchecked(lambda: f64, events: &[RepetitionEvent]) -> f64 {
    events.iter().map(|e| event_nll(lambda, e)).sum()
}

/// First and second derivative of the objective in `λ`.
fn nll_derivatives(lambda: f64, events: &[RepetitionEvent]) -> (f64, f64) {
    let (mut d1, mut d2) = (0.0, 0.0);
    for ev in events {
        let max = ev.candidate_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for &t in &ev.candidate_times {
            let w = (lambda * (t - max)).exp();
            let dt = t - max;
            z += w;
            m1 += w * dt;
            m2 += w * dt * dt;
        }
        let mean = m1 / z;
        d1 += mean - (ev.prior_time - max);
        d2 += (m2 / z - mean * mean).max(0.0);
    }
    (d1, d2)
}

/// Minimizes a unimodal function on `[lo, hi]` to bracket width `tol`.
/// Ties move the bracket toward `lo`.
pub fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Exact minimizer over `[LAMBDA_MIN, LAMBDA_MAX]` without subsampling.
fn minimize_nll(events: &[RepetitionEvent]) -> f64 {
    let f = |l: f64| nll_unchecked(l, events);
    let mut best = golden_section_min(f, LAMBDA_MIN, LAMBDA_MAX, SEARCH_TOLERANCE);
    let mut fbest = f(best);

    let (d1, d2) = nll_derivatives(best, events);
    if d2 > 0.0 {
        let polished = (best - d1 / d2).clamp(LAMBDA_MIN, LAMBDA_MAX);
        let fp = f(polished);
        if fp < fbest {
            best = polished;
            fbest = fp;
        }
    }
    for edge in [LAMBDA_MIN, LAMBDA_MAX] {
        let fe = f(edge);
        if fe < fbest {
            best = edge;
            fbest = fe;
        }
    }
    best
}

fn subsample<T: Copy, R: Rng + ?Sized>(items: &[T], budget: usize, rng: &mut R) -> Vec<T> {
    if items.len() <= budget {
        return items.to_vec();
    }
    let mut idx = sample_indices(rng, items.len(), budget).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Maximum-likelihood decay rate. At most `budget` events (drawn uniformly
/// without replacement) enter the objective.
pub fn fit_lambda<R: Rng + ?Sized>(events: &[RepetitionEvent], budget: usize, rng: &mut R) -> Result<f64> {
    if events.is_empty() {
        return Err(DpsError::Contract("fit_lambda needs at least one event".into()));
    }
    if events.len() <= budget {
        return Ok(minimize_nll(events));
    }
    let mut idx = sample_indices(rng, events.len(), budget).into_vec();
    idx.sort_unstable();
    let picked: Vec<RepetitionEvent> = idx.into_iter().map(|i| events[i].clone()).collect();
    Ok(minimize_nll(&picked))
}

/// Fitted per-node decay rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRates {
    pub lambda: Vec<f64>,
    pub fallback_lambda: f64,
    pub fitted: Vec<bool>,
}

impl DecayRates {
    /// Every node uses `lambda`.
    pub fn constant(num_nodes: usize, lambda: f64) -> Self {
        DecayRates {
            lambda: vec![lambda; num_nodes],
            fallback_lambda: lambda,
            fitted: vec![false; num_nodes],
        }
    }

    pub fn lambda_for(&self, u: NodeId) -> f64 {
        self.lambda.get(u).copied().unwrap_or(self.fallback_lambda)
    }

    /// `node_id lambda fitted_flag` per line.
    pub fn write_text<W: Write>(&self, g: &TemporalGraph, mut out: W) -> Result<()> {
        for (u, (&l, &f)) in self.lambda.iter().zip(&self.fitted).enumerate() {
            writeln!(out, "{} {} {}", g.node_name(u), l, u8::from(f))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(g: &TemporalGraph, fallback_lambda: f64, reader: R) -> Result<Self> {
        let mut rates = DecayRates::constant(g.num_nodes(), fallback_lambda);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = |msg: &str| DpsError::Parse { line: i + 1, msg: msg.to_string() };
            if f.len() != 3 {
                return Err(bad("expected `node_id lambda fitted_flag`"));
            }
            let u = g.node_id(f[0]).ok_or_else(|| bad("unknown node"))?;
            rates.lambda[u] = f[1].parse().map_err(|_| bad("invalid lambda"))?;
            rates.fitted[u] = f[2] == "1";
        }
        Ok(rates)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdsConfig {
    pub budget: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TdsConfig {
    fn default() -> Self {
        TdsConfig {
            budget: DEFAULT_EVENT_BUDGET,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

fn training_history(g: &TemporalGraph, split: &ChronoSplit, u: NodeId) -> Vec<AdjEntry> {
    g.adjacency(u).iter().filter(|e| split.is_train(e.edge_id)).copied().collect()
}

/// Fits `λ_u` for every node from training interactions only. Nodes without
/// repetition events take the rate fitted on the pooled events of all nodes.
pub fn fit_all(g: &TemporalGraph, split: &ChronoSplit, cfg: &TdsConfig) -> Result<DecayRates> {
    let n = g.num_nodes();
    let per_node: Vec<(Option<f64>, Vec<RepetitionEvent>)> = map_range(cfg.execution, n, |u| {
        let hist = training_history(g, split, u);
        let refs = event_refs(&hist);
        if refs.is_empty() {
            return (None, Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, u as u64));
        let picked = subsample(&refs, cfg.budget, &mut rng);
        let events: Vec<RepetitionEvent> = picked.iter().map(|r| materialize(&hist, r)).collect();
        let lambda = minimize_nll(&events);
        // keep a pooled-candidate sample for the fallback fit
        let pool = subsample(&events.iter().collect::<Vec<_>>(), cfg.budget, &mut rng)
            .into_iter()
            .cloned()
            .collect();
        (Some(lambda), pool)
    });

    let pooled: Vec<&RepetitionEvent> = per_node.iter().flat_map(|(_, p)| p.iter()).collect();
    let fallback_lambda = if pooled.is_empty() {
        log::warn!("no repetition events in the training range; using fallback decay rate 1.0");
        1.0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, u64::MAX));
        let picked: Vec<RepetitionEvent> = subsample(&pooled, cfg.budget, &mut rng).into_iter().cloned().collect();
        minimize_nll(&picked)
    };

    let mut rates = DecayRates::constant(n, fallback_lambda);
    for (u, (l, _)) in per_node.into_iter().enumerate() {
        if let Some(l) = l {
            rates.lambda[u] = l;
            rates.fitted[u] = true;
        }
    }
    Ok(rates)
}

/// Categorical probabilities `exp(λ t_k) / Σ exp(λ t_w)` over `entries`.
pub fn tds_probabilities(lambda: f64, entries: &[AdjEntry]) -> Vec<f64> {
    let max = entries.iter().map(|e| e.timestamp).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = entries.iter().map(|e| (lambda * (e.timestamp - max)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Draws `min(s, |ns|)` distinct interactions by successive categorical
/// draws, renormalizing over the remaining entries after each draw. The
/// result is ordered by time.
pub fn tds_sample<R: Rng + ?Sized>(ns: &NeighborSet, rates: &DecayRates, s: usize, rng: &mut R) -> Vec<AdjEntry> {
    let entries = ns.entries;
    if entries.len() <= s {
        return entries.to_vec();
    }
    let lambda = rates.lambda_for(ns.anchor_node);
    let mut remaining: Vec<usize> = (0..entries.len()).collect();
    let mut chosen = Vec::with_capacity(s);
    let mut weights = Vec::with_capacity(entries.len());
    for _ in 0..s {
        let max = remaining
            .iter()
            .map(|&i| entries[i].timestamp)
            .fold(f64::NEG_INFINITY, f64::max);
        weights.clear();
        weights.extend(remaining.iter().map(|&i| (lambda * (entries[i].timestamp - max)).exp()));
        let total: f64 = weights.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            if x < *w {
                pick = k;
                break;
            }
            x -= w;
        }
        chosen.push(remaining.swap_remove(pick));
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| entries[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(nb: NodeId, t: f64, id: usize) -> AdjEntry {
        AdjEntry { neighbor: nb, timestamp: t, edge_id: id }
    }

    #[test]
    fn events_follow_latest_prior() {
        let h = [entry(1, 1.0, 0), entry(2, 2.0, 1), entry(1, 3.0, 2)];
        let ev = repetition_events_in(&h);
        assert_eq!(ev, vec![RepetitionEvent { anchor_time: 3.0, prior_time: 1.0, candidate_times: vec![1.0, 2.0] }]);

        let h = [entry(1, 1.0, 0), entry(2, 2.0, 1), entry(3, 3.0, 2)];
        assert!(repetition_events_in(&h).is_empty());

        let h = [entry(1, 1.0, 0), entry(1, 2.0, 1), entry(1, 3.0, 2)];
        let ev = repetition_events_in(&h);
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].anchor_time, ev[0].prior_time, ev[0].candidate_times.clone()), (2.0, 1.0, vec![1.0]));
        assert_eq!((ev[1].anchor_time, ev[1].prior_time, ev[1].candidate_times.clone()), (3.0, 2.0, vec![1.0, 2.0]));
    }

    #[test]
    fn simultaneous_repeats_are_not_events() {
        let h = [entry(1, 1.0, 0), entry(1, 1.0, 1)];
        assert!(repetition_events_in(&h).is_empty());
    }

    #[test]
    fn nll_special_cases() {
        let single = [RepetitionEvent { anchor_time: 2.0, prior_time: 1.0, candidate_times: vec![1.0] }];
        for l in [LAMBDA_MIN, 0.3, 50.0, LAMBDA_MAX] {
            assert_eq!(tds_nll(l, &single).unwrap(), 0.0);
        }
        let tie = [RepetitionEvent { anchor_time: 2.0, prior_time: 1.0, candidate_times: vec![1.0, 1.0] }];
        for l in [LAMBDA_MIN, 0.3, 50.0, LAMBDA_MAX] {
            assert!((tds_nll(l, &tie).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(tds_nll(1.0, &[]).is_err());
    }

    #[test]
    fn nll_worked_value() {
        // −(2 − ln(e¹ + e²)), evaluated in higher precision: 0.31326168751822283
        let ev = [RepetitionEvent { anchor_time: 3.0, prior_time: 2.0, candidate_times: vec![1.0, 2.0] }];
        assert!((tds_nll(1.0, &ev).unwrap() - 0.313_261_687_518_222_83).abs() < 1e-12);
    }

    #[test]
    fn fit_hits_the_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let newest = vec![
            RepetitionEvent { anchor_time: 5.0, prior_time: 4.0, candidate_times: vec![1.0, 2.0, 4.0] },
            RepetitionEvent { anchor_time: 6.0, prior_time: 3.0, candidate_times: vec![1.0, 3.0] },
        ];
        assert_eq!(fit_lambda(&newest, 100, &mut rng).unwrap(), LAMBDA_MAX);
        let oldest = vec![
            RepetitionEvent { anchor_time: 5.0, prior_time: 1.0, candidate_times: vec![1.0, 2.0, 4.0] },
            RepetitionEvent { anchor_time: 6.0, prior_time: 1.0, candidate_times: vec![1.0, 3.0] },
        ];
        assert_eq!(fit_lambda(&oldest, 100, &mut rng).unwrap(), LAMBDA_MIN);
        assert!(fit_lambda(&[], 100, &mut rng).is_err());
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section_min(|x| (x - 3.7).powi(2), 0.0, 10.0, 1e-9);
        assert!((x - 3.7).abs() < 1e-8);
    }

    #[test]
    fn sampler_returns_everything_when_small() {
        let h = [entry(1, 1.0, 0), entry(2, 2.0, 1)];
        let ns = NeighborSet { anchor_node: 0, anchor_time: 3.0, entries: &h };
        let rates = DecayRates::constant(3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(tds_sample(&ns, &rates, 5, &mut rng), h.to_vec());
        let empty = NeighborSet { anchor_node: 0, anchor_time: 0.0, entries: &[] };
        assert!(tds_sample(&empty, &rates, 5, &mut rng).is_empty());
    }

    #[test]
    fn decay_rates_text_round_trip() {
        let g = TemporalGraph::new(3, vec![]).unwrap();
        let rates = DecayRates { lambda: vec![0.5, 2.0, 1.5], fallback_lambda: 1.5, fitted: vec![true, true, false] };
        let mut buf = Vec::new();
        rates.write_text(&g, &mut buf).unwrap();
        let back = DecayRates::read_text(&g, 1.5, buf.as_slice()).unwrap();
        assert_eq!(back, rates);
    }
}
