//! Neighbor samplers behind one interface, and link-prediction examples.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DpsError, Result};
use crate::gas::{gas_sample, GasScorer};
use crate::graph::{sample_negative, AdjEntry, NeighborSet, NodeId, TemporalGraph};
use crate::par::{item_seed, map_indexed, Execution};
use crate::tds::{tds_sample, DecayRates};

/// `min(s, |ns|)` entries drawn uniformly without replacement, in time order.
pub fn uniform_sample<R: Rng + ?Sized>(ns: &NeighborSet, s: usize, rng: &mut R) -> Vec<AdjEntry> {
    if ns.len() <= s {
        return ns.entries.to_vec();
    }
    let mut idx = sample_indices(rng, ns.len(), s).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| ns.entries[i]).collect()
}

#[derive(Clone, Copy)]
pub enum SamplerKind<'a> {
    Tds(&'a DecayRates),
    Gas(&'a GasScorer),
    Uniform,
}

/// A sampler that counts its invocations.
pub struct NeighborSampler<'a> {
    kind: SamplerKind<'a>,
    calls: AtomicUsize,
}

impl<'a> NeighborSampler<'a> {
    pub fn new(kind: SamplerKind<'a>) -> Self {
        NeighborSampler { kind, calls: AtomicUsize::new(0) }
    }

    pub fn tds(rates: &'a DecayRates) -> Self {
        Self::new(SamplerKind::Tds(rates))
    }

    pub fn gas(scorer: &'a GasScorer) -> Self {
        Self::new(SamplerKind::Gas(scorer))
    }

    pub fn uniform() -> Self {
        Self::new(SamplerKind::Uniform)
    }

    pub fn kind(&self) -> SamplerKind<'a> {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SamplerKind::Tds(_) => "tds",
            SamplerKind::Gas(_) => "gas",
            SamplerKind::Uniform => "uniform",
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn sample<R: Rng + ?Sized>(&self, ns: &NeighborSet, s: usize, rng: &mut R) -> Vec<AdjEntry> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match self.kind {
            SamplerKind::Tds(rates) => tds_sample(ns, rates, s, rng),
            SamplerKind::Gas(scorer) => gas_sample(scorer, ns, s),
            SamplerKind::Uniform => uniform_sample(ns, s, rng),
        }
    }
}

/// A positive interaction and its corrupted counterpart `(src, neg, time)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkExample {
    pub src: NodeId,
    pub dst: NodeId,
    pub neg: NodeId,
    pub time: f64,
}

/// One uniform negative per positive edge.
pub fn link_examples<R: Rng + ?Sized>(g: &TemporalGraph, edge_ids: &[usize], rng: &mut R) -> Vec<LinkExample> {
    edge_ids
        .iter()
        .map(|&id| {
            let e = g.edge(id);
            LinkExample { src: e.src, dst: e.dst, neg: sample_negative(g, e, rng), time: e.timestamp }
        })
        .collect()
}

/// Scores positives and negatives in fixed-size chunks, each chunk with its
/// own rng stream, so the result does not depend on `exec`.
pub fn score_in_chunks<F>(
    exec: Execution,
    examples: &[LinkExample],
    chunk: usize,
    seed: u64,
    f: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[LinkExample], &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> + Sync + Send,
{
    if examples.is_empty() {
        return Err(DpsError::Contract("no examples to score".into()));
    }
    let chunks: Vec<&[LinkExample]> = examples.chunks(chunk.max(1)).collect();
    let parts = map_indexed(exec, &chunks, |i, c| {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64));
        f(c, &mut rng)
    });
    let (mut pos, mut neg) = (Vec::with_capacity(examples.len()), Vec::with_capacity(examples.len()));
    for p in parts {
        let (a, b) = p?;
        pos.extend(a);
        neg.extend(b);
    }
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_sample_sizes() {
        let h: Vec<AdjEntry> = (0..10).map(|i| AdjEntry { neighbor: i, timestamp: i as f64, edge_id: i }).collect();
        let ns = NeighborSet { anchor_node: 99, anchor_time: 20.0, entries: &h };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = uniform_sample(&ns, 4, &mut rng);
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0].edge_id < w[1].edge_id));
        assert_eq!(uniform_sample(&ns, 10, &mut rng), h);
    }

    #[test]
    fn sampler_counts_calls() {
        let s = NeighborSampler::uniform();
        let ns = NeighborSet { anchor_node: 0, anchor_time: 0.0, entries: &[] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.sample(&ns, 3, &mut rng);
        s.sample(&ns, 3, &mut rng);
        assert_eq!(s.calls(), 2);
        assert_eq!(s.name(), "uniform");
    }
}
