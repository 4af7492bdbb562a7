mod common;

use common::{grid_argmin, naive_nll, random_events, softmax, within_3_sigma};
use dps_core::graph::*;
use dps_core::par::Execution;
use dps_core::tds::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn star(times: &[f64]) -> TemporalGraph {
    let its = times
        .iter()
        .enumerate()
        .map(|(i, &t)| Interaction { src: 0, dst: i + 1, timestamp: t, features: vec![] })
        .collect();
    TemporalGraph::new(times.len() + 1, its).unwrap()
}

fn frequencies(times: &[f64], lambda: f64, draws: usize, seed: u64) -> Vec<usize> {
    let g = star(times);
    let rates = DecayRates::constant(g.num_nodes(), lambda);
    let ns = g.neighbors_before(0, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0; times.len()];
    for _ in 0..draws {
        let pick = tds_sample(&ns, &rates, 1, &mut rng);
        counts[pick[0].neighbor - 1] += 1;
    }
    counts
}

#[test]
fn fit_matches_dense_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for set in 0..10 {
        let truth = rng.gen_range(0.05..4.0);
        let events = random_events(&mut rng, 50, 4, 8.0, truth);
        let fit = fit_lambda(&events, DEFAULT_EVENT_BUDGET, &mut rng).unwrap();
        let grid = grid_argmin(&events, LAMBDA_MIN, LAMBDA_MAX, 100_000);
        assert!((fit - grid).abs() < 1e-3, "set {set}: fit {fit} grid {grid}");
        assert!((tds_nll(fit, &events).unwrap() - naive_nll(fit, &events)).abs() < 1e-9);
    }
}

#[test]
fn nll_is_midpoint_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.gen_range(1..6);
        let truth = rng.gen_range(0.0..20.0);
        let events = random_events(&mut rng, n, 5, 1.0, truth);
        let mut a = 10f64.powf(rng.gen_range(-6.0..2.0));
        let mut b = 10f64.powf(rng.gen_range(-6.0..2.0));
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        let mid = tds_nll(0.5 * (a + b), &events).unwrap();
        let chord = 0.5 * (tds_nll(a, &events).unwrap() + tds_nll(b, &events).unwrap());
        assert!(mid <= chord + 1e-9, "λ1 {a} λ2 {b}: {mid} > {chord}");
    }
}

#[test]
fn sampling_matches_softmax() {
    let counts = frequencies(&[0.0, 1.0, 2.0], 1.0, 100_000, 1);
    let p = softmax(&[0.0, 1.0, 2.0]);
    assert!((p[0] - 0.090).abs() < 1e-3 && (p[1] - 0.245).abs() < 1e-3 && (p[2] - 0.665).abs() < 1e-3);
    within_3_sigma(&counts, &p, 100_000).unwrap();
}

#[test]
fn equal_times_split_evenly() {
    let counts = frequencies(&[3.0, 3.0], 2.0, 100_000, 2);
    within_3_sigma(&counts, &[0.5, 0.5], 100_000).unwrap();
}

#[test]
fn tiny_rate_is_uniform() {
    let counts = frequencies(&[0.0, 1.0, 4.0, 9.0], LAMBDA_MIN, 100_000, 3);
    within_3_sigma(&counts, &[0.25; 4], 100_000).unwrap();
}

#[test]
fn every_node_with_repeats_is_fitted() {
    let mut its = Vec::new();
    for k in 0..6 {
        for (u, v) in [(0, 1), (1, 2), (2, 0)] {
            its.push(Interaction { src: u, dst: v, timestamp: f64::from(3 * k + u as i32), features: vec![] });
        }
    }
    its.push(Interaction { src: 3, dst: 4, timestamp: 30.0, features: vec![] });
    its.push(Interaction { src: 0, dst: 1, timestamp: 31.0, features: vec![] });
    its.push(Interaction { src: 0, dst: 2, timestamp: 32.0, features: vec![] });
    let g = TemporalGraph::new(5, its).unwrap();
    let split = chrono_split(&g, (0.7, 0.15, 0.15)).unwrap();
    let rates = fit_all(&g, &split, &TdsConfig::default()).unwrap();
    assert!(rates.fitted[..3].iter().all(|&f| f));
    // node 3 and 4 never repeat a partner
    assert!(!rates.fitted[3] && !rates.fitted[4]);
    assert_eq!(rates.lambda[3], rates.fallback_lambda);
    assert!(rates.lambda.iter().all(|&l| (LAMBDA_MIN..=LAMBDA_MAX).contains(&l)));
}

#[test]
fn no_repetition_anywhere_falls_back_to_one() {
    let g = star(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    let split = chrono_split(&g, (0.6, 0.2, 0.2)).unwrap();
    let rates = fit_all(&g, &split, &TdsConfig::default()).unwrap();
    assert_eq!(rates.fallback_lambda, 1.0);
    assert!(rates.fitted.iter().all(|f| !f));
}

#[test]
fn parallel_and_sequential_fits_agree() {
    let g = synth_generate(&SynthParams { num_nodes: 80, num_edges: 3000, ..Default::default() }).unwrap().graph;
    let split = chrono_split(&g, (0.7, 0.15, 0.15)).unwrap();
    let seq = fit_all(&g, &split, &TdsConfig { execution: Execution::Sequential, budget: 20, seed: 4 }).unwrap();
    let par = fit_all(&g, &split, &TdsConfig { execution: Execution::Parallel, budget: 20, seed: 4 }).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn recovers_planted_decay_rate() {
    for r in [0.001, 0.002, 0.005] {
        let g = synth_generate(&SynthParams { decay_rate: r, ..Default::default() }).unwrap().graph;
        let split = chrono_split(&g, (0.7, 0.15, 0.15)).unwrap();
        let rates = fit_all(&g, &split, &TdsConfig::default()).unwrap();
        let mut l: Vec<f64> = rates.lambda.iter().zip(&rates.fitted).filter(|(_, &f)| f).map(|(&l, _)| l).collect();
        l.sort_by(f64::total_cmp);
        let median = l[l.len() / 2];
        assert!(median / r < 2.0 && r / median < 2.0, "rate {r}: median fitted {median}");
    }
}

fn arb_entries() -> impl Strategy<Value = Vec<AdjEntry>> {
    prop::collection::vec(-50.0f64..50.0, 1..30).prop_map(|ts| {
        let mut ts = ts;
        ts.sort_by(f64::total_cmp);
        ts.into_iter().enumerate().map(|(i, t)| AdjEntry { neighbor: i, timestamp: t, edge_id: i }).collect()
    })
}

proptest! {
    #[test]
    fn probabilities_sum_to_one_and_ignore_shifts(entries in arb_entries(), lambda in 1e-6f64..100.0, shift in -1e3f64..1e3) {
        let p = tds_probabilities(lambda, &entries);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let moved: Vec<AdjEntry> = entries.iter().map(|e| AdjEntry { timestamp: e.timestamp + shift, ..*e }).collect();
        let q = tds_probabilities(lambda, &moved);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn sample_sizes_and_uniqueness(times in prop::collection::vec(0.0f64..20.0, 0..25), s in 1usize..30, lambda in 1e-6f64..100.0, seed in any::<u64>()) {
        let g = star(&times);
        let rates = DecayRates::constant(g.num_nodes(), lambda);
        let ns = g.neighbors_before(0, 21.0).unwrap();
        let out = tds_sample(&ns, &rates, s, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.len(), s.min(ns.len()));
        let mut ids: Vec<usize> = out.iter().map(|e| e.edge_id).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), out.len());
        prop_assert!(out.windows(2).all(|w| w[0].edge_id < w[1].edge_id));
    }
}
