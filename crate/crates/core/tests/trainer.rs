mod common;

use common::pairwise_auc;
use dps_core::checkpoint::Artifacts;
use dps_core::graph::*;
use dps_core::metrics::*;
use dps_core::model::SamplerMode;
use dps_core::par::Execution;
use dps_core::tds::fit_all;
use dps_core::trainer::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn auc_matches_pairwise_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let np = rng.gen_range(1..40);
        let nn = rng.gen_range(1..40);
        // coarse grid so ties are common
        let mut draw = |n: usize| (0..n).map(|_| f64::from(rng.gen_range(0..12)) / 11.0).collect::<Vec<f64>>();
        let (pos, neg) = (draw(np), draw(nn));
        let fast = roc_auc(&pos, &neg).unwrap();
        let slow = pairwise_auc(&pos, &neg);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }
}

#[test]
fn auc_worked_examples() {
    assert_eq!(roc_auc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
    assert_eq!(roc_auc(&[0.8, 0.7, 0.6], &[0.5, 0.2]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
    assert!(roc_auc(&[], &[0.1]).is_err());
    assert_eq!(accuracy(&[0.9, 0.4], &[0.5, 0.1], 0.5), 0.5);
}

#[test]
fn early_stopping_keeps_the_best_snapshot() {
    let seq = [0.60, 0.70, 0.65, 0.69, 0.70, 0.50, 0.90];
    let mut stop: EarlyStopping<usize> = EarlyStopping::new(3);
    let mut stopped_at = None;
    for (epoch, &auc) in seq.iter().enumerate() {
        if stop.observe(auc, || epoch) {
            stopped_at = Some(epoch);
            break;
        }
    }
    // a tie does not count as an improvement
    assert_eq!(stopped_at, Some(4));
    assert_eq!(stop.best_epoch(), Some(1));
    assert_eq!(stop.best_score(), Some(0.70));
    assert_eq!(stop.epochs_seen(), 5);
    assert_eq!(stop.into_best(), Some(1));
}

#[test]
fn link_loss_value_matches_tape() {
    let pos = [0.9, 0.2, 1.0, 0.5];
    let neg = [0.1, 0.7, 0.0, 0.5];
    let mut tape = dps_autodiff::Tape::new();
    let pp = tape.constant(dps_autodiff::Tensor::new(&[4, 1], pos.to_vec()).unwrap());
    let pn = tape.constant(dps_autodiff::Tensor::new(&[4, 1], neg.to_vec()).unwrap());
    let l = link_loss(&mut tape, pp, pn).unwrap();
    let want: f64 = pos.iter().zip(&neg).map(|(a, b)| link_loss_value(*a, *b)).sum::<f64>() / 4.0;
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    assert!(tape.value(l).item().is_finite());
}

fn separable(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let label = u8::from(i % 4 == 0);
        let radius = if label == 1 { 2.0 } else { 0.5 };
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
        x.push(v.iter().map(|a| a * radius / norm).collect());
        y.push(label);
    }
    (x, y)
}

#[test]
fn classifier_separates_by_norm() {
    let (x, y) = separable(1200, 6, 1);
    let cfg = ClassifierConfig { lr: 1e-2, max_epochs: 60, batch_size: 100, ..ClassifierConfig::default() };
    let set = |a: usize, b: usize| LabelledSet { x: &x[a..b], y: &y[a..b] };
    let (_, report) = train_classifier(set(0, 800), set(800, 1000), set(1000, 1200), &cfg).unwrap();
    assert!(report.auc > 0.9, "{report:?}");
}

#[test]
fn identical_embeddings_give_chance_auc() {
    let x = vec![vec![0.3, -0.2, 0.7]; 400];
    let y: Vec<u8> = (0..400).map(|i| u8::from(i % 3 == 0)).collect();
    let cfg = ClassifierConfig { max_epochs: 5, ..ClassifierConfig::default() };
    let set = |a: usize, b: usize| LabelledSet { x: &x[a..b], y: &y[a..b] };
    let (_, report) = train_classifier(set(0, 200), set(200, 300), set(300, 400), &cfg).unwrap();
    assert!((report.auc - 0.5).abs() < 1e-9, "{report:?}");
}

fn planted() -> (TemporalGraph, ChronoSplit) {
    let g = synth_generate(&SynthParams { num_nodes: 100, num_edges: 2000, ..Default::default() }).unwrap().graph;
    let split = chrono_split(&g, (0.7, 0.15, 0.15)).unwrap();
    (g, split)
}

fn small_config(mode: SamplerMode) -> TrainConfig {
    TrainConfig {
        d_model: 16,
        d_time: 16,
        neighbors: 10,
        layers: 1,
        heads: 2,
        batch_size: 100,
        lr: 1e-2,
        max_epochs: 15,
        patience: 5,
        gas_max_epochs: 3,
        allow_off_grid: true,
        sampler_mode: mode,
        execution: Execution::Sequential,
        ..TrainConfig::default()
    }
}

#[test]
fn dps_learns_the_planted_graph() {
    let (g, split) = planted();
    let res = run_modes(&g, &split, &small_config(SamplerMode::Dps), &[SamplerMode::Dps]).unwrap();
    let row = &res.rows[0];
    assert!(row.validation.loss_history[0] < row.validation.init_loss, "{:?}", row.validation);
    assert!(row.test.auc > 0.85, "test auc {}", row.test.auc);
}

#[test]
fn training_is_deterministic() {
    let (g, split) = planted();
    let rates = fit_all(&g, &split, &small_config(SamplerMode::TdsOnly).tds_config()).unwrap();
    let cfg = TrainConfig { max_epochs: 2, ..small_config(SamplerMode::TdsOnly) };
    let a = train_dps(&g, &split, Some(&rates), None, &cfg).unwrap();
    let b = train_dps(&g, &split, Some(&rates), None, &TrainConfig { execution: Execution::Parallel, ..cfg.clone() }).unwrap();
    assert_eq!(a.report, b.report);
    for ((_, n, x), (_, _, y)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(x, y, "{n} differs");
    }
}

#[test]
fn ablation_modes_use_only_their_samplers() {
    let (g, split) = planted();
    let cfg = TrainConfig { max_epochs: 1, gas_max_epochs: 1, ..small_config(SamplerMode::Dps) };
    let res = ablation_run(&g, &split, &cfg).unwrap();
    let modes: Vec<SamplerMode> = res.rows.iter().map(|r| r.mode).collect();
    assert_eq!(modes, SamplerMode::ALL.to_vec());
    for row in &res.rows {
        let u = &row.usage;
        assert!(row.test.auc.is_finite() && row.test.n_pos > 0);
        match row.mode {
            SamplerMode::TdsOnly => {
                assert!(u.tds_calls > 0 && u.gas_calls == 0 && u.uniform_calls == 0);
                assert!(!u.touched_prefix("dps.fusion") && !u.touched_prefix("gas"));
            }
            SamplerMode::GasOnly => {
                assert!(u.gas_calls > 0 && u.tds_calls == 0 && u.uniform_calls == 0);
                assert!(!u.touched_prefix("dps.fusion") && !u.touched_prefix("tds"));
            }
            SamplerMode::Uniform => assert!(u.uniform_calls > 0 && u.tds_calls == 0 && u.gas_calls == 0),
            SamplerMode::NoFusion => {
                assert!(u.tds_calls > 0 && u.gas_calls > 0);
                assert!(u.touched_prefix("dps.concat") && !u.touched_prefix("dps.fusion"));
            }
            SamplerMode::Dps => {
                assert!(u.tds_calls > 0 && u.gas_calls > 0);
                assert!(u.touched_prefix("dps.fusion") && !u.touched_prefix("dps.concat"));
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_metrics() {
    let (g, split) = planted();
    let cfg = TrainConfig { max_epochs: 1, gas_max_epochs: 1, ..small_config(SamplerMode::Dps) };
    let res = run_modes(&g, &split, &cfg, &[SamplerMode::Dps]).unwrap();
    let (gas, _) = res.gas.clone().unwrap();
    let art = Artifacts { dps: Some(res.models[0].clone()), gas: Some(gas), rates: res.rates.clone() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    art.save(&path, &g).unwrap();
    let back = Artifacts::load(&path, Some(&g)).unwrap();

    let test = test_examples(&g, &split, cfg.seed);
    let score = |a: &Artifacts| {
        let scorer = a.gas.as_ref().unwrap().scorer(&g).unwrap();
        let samplers = SamplerSet::new(SamplerMode::Dps, a.rates.as_ref(), Some(&scorer)).unwrap();
        evaluate_links(a.dps.as_ref().unwrap(), &g, &samplers, &test, Execution::Sequential, cfg.seed).unwrap()
    };
    let (before, after) = (score(&art), score(&back));
    assert_eq!(before, after);
    assert_eq!(before.auc, res.rows[0].test.auc);

    let other = synth_generate(&SynthParams { num_nodes: 100, num_edges: 2000, seed: 8, ..Default::default() }).unwrap().graph;
    assert!(Artifacts::load(&path, Some(&other)).is_err());
}

proptest! {
    #[test]
    fn loss_ignores_pair_order(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..30), seed in any::<u64>()) {
        let mean = |ps: &[(f64, f64)]| ps.iter().map(|(a, b)| link_loss_value(*a, *b)).sum::<f64>() / ps.len() as f64;
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((mean(&pairs) - mean(&shuffled)).abs() < 1e-9);
        prop_assert!(mean(&pairs).is_finite());
    }

    #[test]
    fn auc_is_rank_invariant(pos in prop::collection::vec(-5.0f64..5.0, 1..20), neg in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let a = roc_auc(&pos, &neg).unwrap();
        let f = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        prop_assert!((a - roc_auc(&f(&pos), &f(&neg)).unwrap()).abs() < 1e-12);
        prop_assert!((a + roc_auc(&neg, &pos).unwrap() - 1.0).abs() < 1e-12);
    }
}
