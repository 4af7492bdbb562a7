//! Central finite-difference checks over every differentiable component.

use dps_autodiff::check::{check_inputs, check_params, composite_suite, op_suite, TensorCheck};
use dps_autodiff::{glorot_uniform, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gas::{GasModel, GumbelDraw};
use crate::graph::{Interaction, TemporalGraph};
use crate::metrics::link_loss;
use crate::model::{conv_forward, Branches, fuse, predict_link, ConvLayer, DpsModel, FusionLayer, LinkHead, ModelHyper, SamplerMode, TimeKernel};
use crate::sampling::NeighborSampler;
use crate::tds::DecayRates;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub group: String,
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn rows(group: &str, checks: Vec<TensorCheck>) -> Vec<CheckRow> {
    checks
        .into_iter()
        .map(|c| CheckRow { group: group.to_string(), name: c.name, rel_error: c.rel_error, passed: c.rel_error < TOLERANCE })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn weighted(tape: &mut Tape, x: Var, seed: u64) -> dps_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, tape.shape(x), 1.0));
    let p = tape.mul(x, w)?;
    tape.sum_all(p)
}

fn lift<T>(r: Result<T>) -> dps_autodiff::Result<T> {
    r.map_err(|e| match e {
        crate::DpsError::Autodiff(a) => a,
        other => dps_autodiff::AutodiffError::InvalidShape { op: "model", shape: vec![], msg: other.to_string() },
    })
}

/// Time kernel gradient with respect to ω.
pub fn time_kernel_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let mut store = ParamStore::new();
    let kernel = TimeKernel::register(&mut store, "time.omega", 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in store.get_mut(kernel.omega).data_mut() {
        *w = rng.gen_range(0.1..2.0);
    }
    let dts: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..4.0)).collect();
    Ok(check_params(&store, None, STEP, |t, s| {
        let e = lift(kernel.encode(t, s, &dts, None))?;
        weighted(t, e, seed)
    })?)
}

/// Attention convolution: parameters and both inputs, with padded slots.
pub fn conv_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, slots, d, d_in, heads) = (3, 4, 4, 7, 2);
    let mut store = ParamStore::new();
    let layer = ConvLayer::register(&mut store, "conv", d, d_in, heads, &mut rng);
    let h_u = random(&mut rng, &[q, d], 1.0);
    let h_e = random(&mut rng, &[q * slots, d_in], 1.0);
    let keep: Vec<bool> = (0..q * slots).map(|i| i % slots < 1 + i / slots).collect();
    let dropout_seed = rng.gen::<u64>();
    let forward = |t: &mut Tape, s: &ParamStore, hu: Var, he: Var| -> dps_autodiff::Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = lift(conv_forward(t, s, &layer, hu, he, &keep, slots, 0.2, true, &mut r))?;
        weighted(t, out.out, seed)
    };
    let mut out = check_params(&store, None, STEP, |t, s| {
        let hu = t.constant(h_u.clone());
        let he = t.constant(h_e.clone());
        forward(t, s, hu, he)
    })?;
    let mut inputs = check_inputs(&[h_u.clone(), h_e.clone()], STEP, |t, v| forward(t, &store, v[0], v[1]))?;
    for c in &mut inputs {
        c.name = format!("conv.{}", c.name);
    }
    out.extend(inputs);
    Ok(out)
}

/// Fusion layer: parameters and both branch inputs.
pub fn fusion_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = FusionLayer::register(&mut store, "fusion", 5, &mut rng);
    for id in [layer.b_tds, layer.b_gas] {
        *store.get_mut(id) = random(&mut rng, &[5], 0.5);
    }
    let a = random(&mut rng, &[3, 5], 1.0);
    let b = random(&mut rng, &[3, 5], 1.0);
    let mut out = check_params(&store, None, STEP, |t, s| {
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        let (f, _) = lift(fuse(t, s, &layer, x, y))?;
        weighted(t, f, seed)
    })?;
    let mut inputs = check_inputs(&[a.clone(), b.clone()], STEP, |t, v| {
        let (f, _) = lift(fuse(t, &store, &layer, v[0], v[1]))?;
        weighted(t, f, seed)
    })?;
    for c in &mut inputs {
        c.name = format!("fusion.{}", c.name);
    }
    out.extend(inputs);
    Ok(out)
}

/// Prediction head feeding the link loss.
pub fn head_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = LinkHead::register(&mut store, "head", 4, &mut rng);
    let hu = random(&mut rng, &[4, 4], 1.0);
    let hv = random(&mut rng, &[4, 4], 1.0);
    let hn = random(&mut rng, &[4, 4], 1.0);
    Ok(check_params(&store, None, STEP, |t, s| {
        let (u, v, n) = (t.constant(hu.clone()), t.constant(hv.clone()), t.constant(hn.clone()));
        let pp = lift(predict_link(t, s, &head, u, v))?;
        let pn = lift(predict_link(t, s, &head, u, n))?;
        lift(link_loss(t, pp, pn))
    })?)
}

/// Link loss with respect to both probability vectors.
pub fn loss_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Tensor::new(&[5, 1], (0..5).map(|_| rng.gen_range(0.05..0.95)).collect())?;
    let n = Tensor::new(&[5, 1], (0..5).map(|_| rng.gen_range(0.05..0.95)).collect())?;
    let mut out = check_inputs(&[p, n], STEP, |t, v| lift(link_loss(t, v[0], v[1])))?;
    for c in &mut out {
        c.name = format!("link_loss.{}", c.name);
    }
    Ok(out)
}

/// Small random temporal graph over `n` nodes.
pub fn toy_graph(n: usize, edges: usize, edge_dim: usize, seed: u64) -> Result<TemporalGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let interactions = (0..edges)
        .map(|_| {
            t += rng.gen_range(0.1..1.0);
            let src = rng.gen_range(0..n);
            let mut dst = rng.gen_range(0..n - 1);
            if dst >= src {
                dst += 1;
            }
            Interaction { src, dst, timestamp: t, features: (0..edge_dim).map(|_| rng.gen_range(-1.0..1.0)).collect() }
        })
        .collect();
    TemporalGraph::new(n, interactions)
}

/// GAS aggregation: gradients through the renormalized attention into the
/// sampler parameters, with a fixed Gumbel draw.
pub fn gas_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let g = toy_graph(10, 40, 2, seed)?;
    let model = GasModel::new(10, 2, 4, 3, 4, seed)?;
    let (u, t) = (g.edge(39).src, g.edge(39).timestamp + 0.5);
    let entries = g.neighbors_before(u, t)?.entries.to_vec();
    let draw = GumbelDraw::sample(entries.len(), &mut ChaCha8Rng::seed_from_u64(seed));
    let s = (entries.len() / 2).max(1);
    Ok(check_params(&model.store, None, STEP, |tape, store| {
        let h = lift(model.aggregate_with_draw(tape, store, &g, u, t, &entries, s, 0.7, Some(&draw)))?;
        weighted(tape, h, seed)
    })?)
}

/// Full 2-layer DPS loss on a 10-node graph, every parameter tensor.
pub fn end_to_end_checks(seed: u64) -> Result<Vec<TensorCheck>> {
    let g = toy_graph(10, 60, 2, seed)?;
    let hyper = ModelHyper {
        num_nodes: 10,
        edge_dim: 2,
        d_model: 4,
        d_time: 3,
        heads: 2,
        layers: 2,
        neighbors: 3,
        dropout: 0.1,
        mode: SamplerMode::Dps,
    };
    let mut model = DpsModel::new(hyper, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    // move ω off the tiny defaults so every frequency carries signal
    for w in model.store.get_mut(model.kernel.omega).data_mut() {
        *w = rng.gen_range(0.2..2.0);
    }
    let fusion = model.fusion.expect("DPS model has a fusion layer");
    for id in [fusion.b_tds, fusion.b_gas] {
        *model.store.get_mut(id) = glorot_uniform(&[4], &mut rng);
    }
    let rates = DecayRates::constant(10, 0.7);
    let mut gas = GasModel::new(10, 2, 4, 3, 4, seed)?;
    gas.trained = true;
    let scorer = gas.scorer(&g)?;
    let tds = NeighborSampler::tds(&rates);
    let gs = NeighborSampler::gas(&scorer);
    let links: Vec<(usize, usize, f64)> = (50..56)
        .map(|i| {
            let e = g.edge(i);
            (e.src, e.dst, e.timestamp)
        })
        .chain((50..56).map(|i| {
            let e = g.edge(i);
            (e.src, (e.dst + 3) % 10, e.timestamp)
        }))
        .collect();
    let branch_seed = rng.gen::<u64>();
    Ok(check_params(&model.store, None, STEP, |tape, store| {
        let m = DpsModel { store: store.clone(), ..model.clone() };
        let mut r = ChaCha8Rng::seed_from_u64(branch_seed);
        let branches = Branches { tds: Some(&tds), gas: Some(&gs) };
        let p = lift(m.score_links(tape, &g, branches, &links, true, &mut r))?;
        let pp = tape.gather(p, &[0, 1, 2, 3, 4, 5])?;
        let pn = tape.gather(p, &[6, 7, 8, 9, 10, 11])?;
        lift(link_loss(tape, pp, pn))
    })?)
}

/// Every group at once.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let mut all = Vec::new();
    all.extend(rows("ops", op_suite(110, seed, STEP)?));
    all.extend(rows("composite", composite_suite(10, seed, STEP)?));
    all.extend(rows("time_kernel", time_kernel_checks(seed)?));
    all.extend(rows("conv", conv_checks(seed)?));
    all.extend(rows("fusion", fusion_checks(seed)?));
    all.extend(rows("head", head_checks(seed)?));
    all.extend(rows("loss", loss_checks(seed)?));
    all.extend(rows("gas", gas_checks(seed)?));
    all.extend(rows("end_to_end", end_to_end_checks(seed)?));
    let max_rel_error = all.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let passed = all.iter().all(|r| r.passed);
    Ok(GradcheckReport { rows: all, max_rel_error, passed })
}
