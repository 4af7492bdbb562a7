//! Gumbel attention sampling: a one-layer attention network whose scores
//! rank a node's past interactions. Trained with Gumbel-perturbed top-s
//! selection; inference keeps the deterministic top-s.

use dps_autodiff::{glorot_uniform, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpsError, Result};
use crate::graph::{AdjEntry, ChronoSplit, NeighborSet, NodeId, TemporalGraph};
use crate::metrics::{link_loss, link_loss_value, roc_auc, EarlyStopping};
use crate::model::{predict_link, LinkHead, TimeKernel};
use crate::par::{item_seed, Execution};
use crate::sampling::{link_examples, score_in_chunks, LinkExample};

pub const EPS_CLAMP: f64 = 1e-12;

/// Gumbel noise `g = −ln(−ln ε)`, one value per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraw {
    pub noise: Vec<f64>,
}

impl GumbelDraw {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let noise = (0..n)
            .map(|_| {
                let eps = rng.gen::<f64>().clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
                -(-eps.ln()).ln()
            })
            .collect();
        GumbelDraw { noise }
    }

    pub fn zeros(n: usize) -> Self {
        GumbelDraw { noise: vec![0.0; n] }
    }
}

/// `softmax((p + g) / τ)`.
pub fn gumbel_attention(p: &[f64], draw: &GumbelDraw, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || draw.noise.len() != p.len() {
        return Err(DpsError::Contract(format!(
            "gumbel_attention: tau {tau}, {} scores, {} noise values",
            p.len(),
            draw.noise.len()
        )));
    }
    let z: Vec<f64> = p.iter().zip(&draw.noise).map(|(a, g)| (a + g) / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

/// Indices of the `s` largest values, ties to the lower index, returned in
/// ascending index order.
pub fn gas_select(values: &[f64], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if s < values.len() {
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        idx.truncate(s);
        idx.sort_unstable();
    }
    idx
}

/// `Σ_{k ∈ selected} α̂_k v_k` with `α̂ = softmax(logits)` restricted to the
/// selected set. `logits` is `[1, n]`, `values` is `[n, d]`; returns `[1, d]`.
pub fn gas_aggregate(tape: &mut Tape, logits: Var, selected: &[usize], values: Var) -> Result<Var> {
    let n = tape.value(logits).numel();
    let mut keep = vec![false; n];
    for &k in selected {
        if k >= n {
            return Err(DpsError::Contract(format!("selected index {k} out of {n} candidates")));
        }
        keep[k] = true;
    }
    let alpha = tape.masked_softmax(logits, &keep)?;
    Ok(tape.matmul(alpha, values)?)
}

/// Parameter handles of the sampler network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GasParts {
    pub table: ParamId,
    pub kernel: TimeKernel,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct GasModel {
    pub num_nodes: usize,
    pub edge_dim: usize,
    pub d_node: usize,
    pub d_time: usize,
    pub d_proj: usize,
    pub store: ParamStore,
    pub parts: GasParts,
    pub temperature: f64,
    pub trained: bool,
}

impl GasModel {
    pub fn new(num_nodes: usize, edge_dim: usize, d_node: usize, d_time: usize, d_proj: usize, seed: u64) -> Result<Self> {
        if num_nodes == 0 || d_node == 0 || d_time == 0 || d_proj == 0 {
            return Err(DpsError::Config("GAS dimensions and node count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = d_node + d_time + edge_dim;
        let table = store.add("gas.node_table", glorot_uniform(&[num_nodes, d_node], &mut rng));
        let kernel = TimeKernel::register(&mut store, "gas.time.omega", d_time);
        let w_q = store.add("gas.w_q", glorot_uniform(&[input, d_proj], &mut rng));
        let w_k = store.add("gas.w_k", glorot_uniform(&[input, d_proj], &mut rng));
        let w_v = store.add("gas.w_v", glorot_uniform(&[input, d_proj], &mut rng));
        Ok(GasModel {
            num_nodes,
            edge_dim,
            d_node,
            d_time,
            d_proj,
            store,
            parts: GasParts { table, kernel, w_q, w_k, w_v },
            temperature: 1.0,
            trained: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d_node + self.d_time + self.edge_dim
    }

    /// Candidate features `[n, D]` and anchor feature `[1, D]` on the tape.
    fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &TemporalGraph,
        u: NodeId,
        t: f64,
        entries: &[AdjEntry],
    ) -> Result<(Var, Var)> {
        let table = tape.param(store, self.parts.table);
        let rows: Vec<usize> = entries.iter().map(|e| e.neighbor).collect();
        let dts: Vec<f64> = entries.iter().map(|e| t - e.timestamp).collect();
        let h_n = tape.gather(table, &rows)?;
        let phi = self.parts.kernel.encode(tape, store, &dts, None)?;
        let mut cand = vec![h_n, phi];
        let mut anchor = vec![tape.gather(table, &[u])?, tape.constant(Tensor::ones(&[1, self.d_time]))];
        if self.edge_dim > 0 {
            let feats: Vec<f64> = entries.iter().flat_map(|e| g.edge_features(e.edge_id).iter().copied()).collect();
            cand.push(tape.constant(Tensor::new(&[entries.len(), self.edge_dim], feats)?));
            anchor.push(tape.constant(Tensor::zeros(&[1, self.edge_dim])));
        }
        Ok((tape.concat(&cand, 1)?, tape.concat(&anchor, 1)?))
    }

    /// Scaled scores `[1, n]` of `entries` relative to anchor `u`.
    fn scores_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &TemporalGraph,
        u: NodeId,
        t: f64,
        entries: &[AdjEntry],
    ) -> Result<(Var, Var)> {
        let (h_k, h_u) = self.features(tape, store, g, u, t, entries)?;
        let wq = tape.param(store, self.parts.w_q);
        let wk = tape.param(store, self.parts.w_k);
        let q = tape.matmul(h_k, wq)?;
        let k = tape.matmul(h_u, wk)?;
        let kt = tape.transpose(k)?;
        let p = tape.matmul(q, kt)?;
        let p = tape.reshape(p, &[1, entries.len()])?;
        let p = tape.scale(p, 1.0 / (self.d_proj as f64).sqrt())?;
        Ok((p, h_k))
    }

    /// One-layer embedding `[1, d_proj]` of `(u, t)` over `entries`.
    /// With `noise`, scores are Gumbel-perturbed before selection.
    #[allow(clippy::too_many_arguments)]
    fn aggregate_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &TemporalGraph,
        u: NodeId,
        t: f64,
        entries: &[AdjEntry],
        s: usize,
        tau: f64,
        noise: Option<&mut R>,
    ) -> Result<Var> {
        let draw = noise.map(|rng| GumbelDraw::sample(entries.len(), rng));
        self.aggregate_with_draw(tape, store, g, u, t, entries, s, tau, draw.as_ref())
    }

    /// Same as the sampled aggregation, with the perturbation given.
    #[allow(clippy::too_many_arguments)]
    pub fn aggregate_with_draw(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &TemporalGraph,
        u: NodeId,
        t: f64,
        entries: &[AdjEntry],
        s: usize,
        tau: f64,
        draw: Option<&GumbelDraw>,
    ) -> Result<Var> {
        if entries.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[1, self.d_proj])));
        }
        let (p, h_k) = self.scores_on_tape(tape, store, g, u, t, entries)?;
        let logits = match draw {
            Some(draw) => {
                let g = tape.constant(Tensor::new(&[1, entries.len()], draw.noise.clone())?);
                tape.add(p, g)?
            }
            None => p,
        };
        let logits = tape.scale(logits, 1.0 / tau)?;
        let selected = gas_select(tape.value(logits).data(), s);
        let wv = tape.param(store, self.parts.w_v);
        let values = tape.matmul(h_k, wv)?;
        gas_aggregate(tape, logits, &selected, values)
    }

    /// Inference-time scorer with per-node projections precomputed.
    pub fn scorer(&self, g: &TemporalGraph) -> Result<GasScorer> {
        if !self.trained {
            return Err(DpsError::Contract("GAS model has not been pretrained".into()));
        }
        if g.num_nodes() != self.num_nodes || g.feature_dim() != self.edge_dim {
            return Err(DpsError::Contract("GAS model does not match the graph".into()));
        }
        Ok(GasScorer::new(self, g))
    }
}

/// `p_k = (W_Q h_k)·(W_K h_u) / sqrt(d)` for every entry of `ns`.
pub fn gas_scores(model: &GasModel, g: &TemporalGraph, ns: &NeighborSet) -> Result<Vec<f64>> {
    if ns.is_empty() {
        return Ok(Vec::new());
    }
    if ns.anchor_node >= model.num_nodes {
        return Err(DpsError::UnknownNode(ns.anchor_node));
    }
    let mut tape = Tape::inference();
    let (p, _) = model.scores_on_tape(&mut tape, &model.store, g, ns.anchor_node, ns.anchor_time, ns.entries)?;
    Ok(tape.value(p).data().to_vec())
}

/// Scores candidates as `a_v·k_u + Φ(Δt)·b_u + m·c_u`, where `a_v` is the
/// node block of `W_Q h_k`, `k_u = W_K h_u`, and `b_u`, `c_u` fold the time
/// and feature blocks of `W_Q` against `k_u`.
#[derive(Clone, Debug)]
pub struct GasScorer {
    d_proj: usize,
    d_node: usize,
    d_time: usize,
    edge_dim: usize,
    omegas: Vec<f64>,
    /// `W_Q` rows, `[D, d_proj]`.
    w_q: Vec<f64>,
    /// Node-block query projections, `[N, d_proj]`.
    a: Vec<f64>,
    /// Anchor key projections, `[N, d_proj]`.
    k: Vec<f64>,
    edge_features: Vec<f64>,
    scale: f64,
}

fn project(rows: &[f64], w: &[f64], d_in: usize, d_out: usize, offset_rows: usize, n_rows: usize) -> Vec<f64> {
    // x[i, ..n_rows] @ w[offset_rows..offset_rows + n_rows, ..]
    let n = rows.len() / d_in.max(1);
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        let x = &rows[i * d_in..(i + 1) * d_in];
        let o = &mut out[i * d_out..(i + 1) * d_out];
        for (r, &xv) in x.iter().take(n_rows).enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[(offset_rows + r) * d_out..(offset_rows + r + 1) * d_out];
            for (oj, wj) in o.iter_mut().zip(wr) {
                *oj += xv * wj;
            }
        }
    }
    out
}

impl GasScorer {
    fn new(model: &GasModel, g: &TemporalGraph) -> Self {
        let store = &model.store;
        let table = store.get(model.parts.table).data();
        let w_q = store.get(model.parts.w_q).data().to_vec();
        let w_k = store.get(model.parts.w_k).data();
        let (dn, dt, dp) = (model.d_node, model.d_time, model.d_proj);
        let a = project(table, &w_q, dn, dp, 0, dn);
        let mut k = project(table, w_k, dn, dp, 0, dn);
        // Φ(0) = 1 contributes the column sums of the time block of W_K
        let mut time_bias = vec![0.0; dp];
        for r in dn..dn + dt {
            for (b, w) in time_bias.iter_mut().zip(&w_k[r * dp..(r + 1) * dp]) {
                *b += w;
            }
        }
        for row in k.chunks_mut(dp) {
            for (x, b) in row.iter_mut().zip(&time_bias) {
                *x += b;
            }
        }
        GasScorer {
            d_proj: dp,
            d_node: dn,
            d_time: dt,
            edge_dim: model.edge_dim,
            omegas: model.parts.kernel.omegas(store).to_vec(),
            w_q,
            a,
            k,
            edge_features: (0..g.num_edges()).flat_map(|i| g.edge_features(i).iter().copied()).collect(),
            scale: 1.0 / (dp as f64).sqrt(),
        }
    }

    /// Scores of `ns.entries` relative to `ns.anchor_node`.
    pub fn scores(&self, ns: &NeighborSet) -> Vec<f64> {
        let dp = self.d_proj;
        let ku = &self.k[ns.anchor_node * dp..(ns.anchor_node + 1) * dp];
        let fold = |offset: usize, len: usize| -> Vec<f64> {
            (0..len)
                .map(|r| {
                    let w = &self.w_q[(offset + r) * dp..(offset + r + 1) * dp];
                    w.iter().zip(ku).map(|(a, b)| a * b).sum()
                })
                .collect()
        };
        let b = fold(self.d_node, self.d_time);
        let c = if self.edge_dim > 0 {
            fold(self.d_node + self.d_time, self.edge_dim)
        } else {
            Vec::new()
        };
        ns.entries
            .iter()
            .map(|e| {
                let av = &self.a[e.neighbor * dp..(e.neighbor + 1) * dp];
                let mut s: f64 = av.iter().zip(ku).map(|(x, y)| x * y).sum();
                let dt = ns.anchor_time - e.timestamp;
                s += self.omegas.iter().zip(&b).map(|(w, bb)| (w * dt).cos() * bb).sum::<f64>();
                if !c.is_empty() {
                    let m = &self.edge_features[e.edge_id * self.edge_dim..(e.edge_id + 1) * self.edge_dim];
                    s += m.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
                }
                s * self.scale
            })
            .collect()
    }
}

/// Deterministic top-`s` selection by score, in time order.
pub fn gas_sample(scorer: &GasScorer, ns: &NeighborSet, s: usize) -> Vec<AdjEntry> {
    if ns.len() <= s {
        return ns.entries.to_vec();
    }
    gas_select(&scorer.scores(ns), s).into_iter().map(|i| ns.entries[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasConfig {
    pub d_node: usize,
    pub d_time: usize,
    pub d_proj: usize,
    pub neighbors: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau_init: f64,
    pub tau_decay: f64,
    pub tau_min: f64,
    /// Most recent interactions considered per query during pretraining.
    pub max_candidates: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for GasConfig {
    fn default() -> Self {
        GasConfig {
            d_node: 64,
            d_time: 64,
            d_proj: 64,
            neighbors: 20,
            batch_size: 200,
            max_epochs: 50,
            patience: 3,
            lr: 1e-3,
            weight_decay: 1e-5,
            tau_init: 1.0,
            tau_decay: 0.5,
            tau_min: 0.1,
            max_candidates: 200,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl GasConfig {
    pub fn temperature(&self, epoch: usize) -> f64 {
        (self.tau_init * self.tau_decay.powi(epoch as i32)).max(self.tau_min)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GasReport {
    /// Probe-set loss before any update.
    pub init_loss: f64,
    /// Probe-set loss after each epoch.
    pub loss_history: Vec<f64>,
    pub val_auc_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

const PROBE_SIZE: usize = 2000;
const EVAL_CHUNK: usize = 256;
pub(crate) const VAL_NEGATIVE_STREAM: u64 = 0x5641_4c4e;
const PROBE_STREAM: u64 = 0x5052_4f42;

struct Pretrainer<'a> {
    model: &'a GasModel,
    head: LinkHead,
    g: &'a TemporalGraph,
    cfg: &'a GasConfig,
}

impl Pretrainer<'_> {
    fn candidates<'g>(&self, g: &'g TemporalGraph, u: NodeId, t: f64) -> &'g [AdjEntry] {
        let ns = g.neighbors_before_unchecked(u, t);
        let start = ns.entries.len().saturating_sub(self.cfg.max_candidates);
        &ns.entries[start..]
    }

    /// Link probabilities for the positives and negatives of `batch`.
    fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[LinkExample],
        tau: f64,
        noise: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let mut noise = noise;
        let mut rows = Vec::with_capacity(3 * batch.len());
        for ex in batch {
            for u in [ex.src, ex.dst, ex.neg] {
                let entries = self.candidates(self.g, u, ex.time);
                let h = self.model.aggregate_on_tape(
                    tape,
                    store,
                    self.g,
                    u,
                    ex.time,
                    entries,
                    self.cfg.neighbors,
                    tau,
                    noise.as_deref_mut(),
                )?;
                rows.push(h);
            }
        }
        let h = tape.concat(&rows, 0)?;
        let n = batch.len();
        let idx = |k: usize| (0..n).map(|i| 3 * i + k).collect::<Vec<_>>();
        let (hs, hd, hn) = (tape.gather(h, &idx(0))?, tape.gather(h, &idx(1))?, tape.gather(h, &idx(2))?);
        let p_pos = predict_link(tape, store, &self.head, hs, hd)?;
        let p_neg = predict_link(tape, store, &self.head, hs, hn)?;
        Ok((p_pos, p_neg))
    }

    fn probabilities(&self, store: &ParamStore, examples: &[LinkExample], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        score_in_chunks(self.cfg.execution, examples, EVAL_CHUNK, self.cfg.seed, |chunk, _rng| {
            let mut tape = Tape::inference();
            let (p, n) = self.forward::<ChaCha8Rng>(&mut tape, store, chunk, tau, None)?;
            Ok((tape.value(p).data().to_vec(), tape.value(n).data().to_vec()))
        })
    }

    fn mean_loss(&self, store: &ParamStore, examples: &[LinkExample], tau: f64) -> Result<f64> {
        let (p, n) = self.probabilities(store, examples, tau)?;
        Ok(p.iter().zip(&n).map(|(a, b)| link_loss_value(*a, *b)).sum::<f64>() / p.len() as f64)
    }
}

/// Pretrains the sampler network on link prediction over training edges.
/// The prediction head used for pretraining is dropped afterwards.
pub fn pretrain_gas(g: &TemporalGraph, split: &ChronoSplit, cfg: &GasConfig) -> Result<(GasModel, GasReport)> {
    if split.train.is_empty() {
        return Err(DpsError::Contract("GAS pretraining needs training edges".into()));
    }
    if cfg.neighbors == 0 || cfg.batch_size == 0 || cfg.max_candidates == 0 || !(cfg.tau_min > 0.0) {
        return Err(DpsError::Config(format!("invalid GAS config {cfg:?}")));
    }
    let mut model = GasModel::new(g.num_nodes(), g.feature_dim(), cfg.d_node, cfg.d_time, cfg.d_proj, cfg.seed)?;
    let sampler_params = model.store.len();
    let mut store = model.store.clone();
    let mut head_rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 1));
    let head = LinkHead::register(&mut store, "gas.head", cfg.d_proj, &mut head_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 2));
    let val = link_examples(g, &split.val, &mut ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, VAL_NEGATIVE_STREAM)));
    let mut probe_ids = split.train.clone();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, PROBE_STREAM));
    probe_ids.shuffle(&mut probe_rng);
    probe_ids.truncate(PROBE_SIZE);
    let probe = link_examples(g, &probe_ids, &mut probe_rng);

    let mut report = GasReport::default();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut stopper: EarlyStopping<(ParamStore, f64)> = EarlyStopping::new(cfg.patience.max(1));
    let mut order = split.train.clone();
    let mut last_tau = cfg.tau_init;
    {
        let trainer = Pretrainer { model: &model, head, g, cfg };
        report.init_loss = trainer.mean_loss(&store, &probe, cfg.temperature(0))?;
        for epoch in 0..cfg.max_epochs {
            let tau = cfg.temperature(epoch);
            last_tau = tau;
            order.shuffle(&mut rng);
            for ids in order.chunks(cfg.batch_size) {
                let batch = link_examples(g, ids, &mut rng);
                let mut tape = Tape::new();
                let (pp, pn) = trainer.forward(&mut tape, &store, &batch, tau, Some(&mut rng))?;
                let loss = link_loss(&mut tape, pp, pn)?;
                let grads = tape.backward(loss)?;
                adam.step(&mut store, &grads);
            }
            if !store.all_finite() {
                return Err(DpsError::Contract(format!("GAS parameters became non-finite in epoch {epoch}")));
            }
            report.loss_history.push(trainer.mean_loss(&store, &probe, tau)?);
            let auc = if val.is_empty() {
                report.loss_history.len() as f64
            } else {
                let (p, n) = trainer.probabilities(&store, &val, tau)?;
                roc_auc(&p, &n)?
            };
            report.val_auc_history.push(auc);
            log::info!("gas epoch {epoch}: tau {tau:.3} probe loss {:.4} val auc {auc:.4}", report.loss_history[epoch]);
            if stopper.observe(auc, || (store.clone(), tau)) {
                break;
            }
        }
    }
    report.best_epoch = stopper.best_epoch().unwrap_or(0);
    report.best_val_auc = if val.is_empty() { f64::NAN } else { stopper.best_score().unwrap_or(f64::NAN) };
    let (best, tau) = stopper.into_best().unwrap_or((store, last_tau));
    let mut kept = ParamStore::new();
    for (id, name, t) in best.iter() {
        if id.index() < sampler_params {
            kept.add(name, t.clone());
        }
    }
    model.store = kept;
    model.temperature = tau;
    model.trained = true;
    Ok((model, report))
}
