//! The DPS network: cosine time kernel, attention convolution over sampled
//! temporal subtrees, sampler fusion and the link-prediction head.

use std::collections::HashMap;

use dps_autodiff::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpsError, Result};
use crate::graph::{AdjEntry, NodeId, TemporalGraph};
use crate::sampling::NeighborSampler;

/// Which samplers feed the model and how their embeddings are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplerMode {
    #[serde(rename = "DPS")]
    Dps,
    #[serde(rename = "TDS_only")]
    TdsOnly,
    #[serde(rename = "GAS_only")]
    GasOnly,
    #[serde(rename = "no_fusion")]
    NoFusion,
    #[serde(rename = "uniform")]
    Uniform,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 5] = [
        SamplerMode::Dps,
        SamplerMode::TdsOnly,
        SamplerMode::GasOnly,
        SamplerMode::NoFusion,
        SamplerMode::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Dps => "DPS",
            SamplerMode::TdsOnly => "TDS_only",
            SamplerMode::GasOnly => "GAS_only",
            SamplerMode::NoFusion => "no_fusion",
            SamplerMode::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<SamplerMode> {
        SamplerMode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn uses_tds(self) -> bool {
        matches!(self, SamplerMode::Dps | SamplerMode::TdsOnly | SamplerMode::NoFusion)
    }

    pub fn uses_gas(self) -> bool {
        matches!(self, SamplerMode::Dps | SamplerMode::GasOnly | SamplerMode::NoFusion)
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub num_nodes: usize,
    pub edge_dim: usize,
    pub d_model: usize,
    pub d_time: usize,
    pub heads: usize,
    pub layers: usize,
    pub neighbors: usize,
    pub dropout: f64,
    pub mode: SamplerMode,
}

impl ModelHyper {
    /// Width of an interaction feature `[h_v, Φ(Δt), m]`.
    pub fn input_dim(&self) -> usize {
        self.d_model + self.d_time + self.edge_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpsError::Config(m));
        if self.num_nodes == 0 {
            return bad("model needs at least one node".into());
        }
        if self.d_model == 0 || self.d_time == 0 {
            return bad("dimensions must be positive".into());
        }
        if !matches!(self.heads, 1 | 2 | 4) || self.d_model % self.heads != 0 {
            return bad(format!("heads {} must be 1, 2 or 4 and divide d_model {}", self.heads, self.d_model));
        }
        if !matches!(self.layers, 1 | 2) {
            return bad(format!("layers must be 1 or 2, got {}", self.layers));
        }
        if self.neighbors == 0 {
            return bad("neighbors must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `Φ(Δt) = cos(ω Δt)` componentwise.
pub fn time_encode(omegas: &[f64], dt: f64) -> Vec<f64> {
    omegas.iter().map(|w| (w * dt).cos()).collect()
}

/// Interaction embedding `concat(h_v, Φ(Δt), m)`.
pub fn edge_feature(h_v: &[f64], omegas: &[f64], dt: f64, m: &[f64]) -> Vec<f64> {
    let mut out = h_v.to_vec();
    out.extend(time_encode(omegas, dt));
    out.extend_from_slice(m);
    out
}

/// Trainable cosine time encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeKernel {
    pub omega: ParamId,
}

impl TimeKernel {
    /// Frequencies spread geometrically from 1 down to 1e-9.
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let omegas: Vec<f64> = (0..dim)
            .map(|k| if dim == 1 { 1.0 } else { 10f64.powf(-9.0 * k as f64 / (dim - 1) as f64) })
            .collect();
        TimeKernel { omega: store.add(name, Tensor::from_vec(omegas)) }
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.omega).numel()
    }

    pub fn omegas<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.omega).data()
    }

    /// `[n, d_time]` encodings; rows with `keep[i] == false` are zero.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, dts: &[f64], keep: Option<&[bool]>) -> Result<Var> {
        let d = self.dim(store);
        let omega = tape.param(store, self.omega);
        let omega = tape.reshape(omega, &[1, d])?;
        let dt = tape.constant(Tensor::new(&[dts.len(), 1], dts.to_vec())?);
        let phase = tape.matmul(dt, omega)?;
        let enc = tape.cos(phase)?;
        match keep {
            Some(keep) if keep.iter().any(|k| !k) => {
                let mask: Vec<f64> = keep.iter().map(|&k| f64::from(u8::from(k))).collect();
                let mask = tape.constant(Tensor::new(&[dts.len(), 1], mask)?);
                Ok(tape.mul(enc, mask)?)
            }
            _ => Ok(enc),
        }
    }
}

/// Multi-head attention convolution. Projections for all heads are stored
/// side by side, `[D, H * d_head]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub merge: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl ConvLayer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_input: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let width = d_model;
        ConvLayer {
            w_q: store.add(format!("{prefix}.w_q"), glorot_uniform(&[d_model, width], rng)),
            w_k: store.add(format!("{prefix}.w_k"), glorot_uniform(&[d_input, width], rng)),
            w_v: store.add(format!("{prefix}.w_v"), glorot_uniform(&[d_input, width], rng)),
            merge: store.add(format!("{prefix}.merge"), glorot_uniform(&[width, d_model], rng)),
            heads,
            head_dim: width / heads,
        }
    }
}

/// Output of [`conv_forward`]: `[Q, d_model]` embeddings and the per-head
/// attention weights `[Q, S]` before dropout.
pub struct ConvOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// Attention convolution for `Q` anchors over `S` slots each.
///
/// `h_u` is `[Q, d_model]`, `h_e` is `[Q * S, D]`, `keep` marks real
/// (unpadded) slots. Anchors with no real slot produce zero rows.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &ConvLayer,
    h_u: Var,
    h_e: Var,
    keep: &[bool],
    slots: usize,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<ConvOutput> {
    let q_rows = tape.shape(h_u)[0];
    if keep.len() != q_rows * slots || tape.shape(h_e)[0] != q_rows * slots {
        return Err(DpsError::Contract(format!(
            "conv_forward: {q_rows} anchors x {slots} slots, got {} mask bits and {} rows",
            keep.len(),
            tape.shape(h_e)[0]
        )));
    }
    let (wq, wk, wv, wm) = (
        tape.param(store, layer.w_q),
        tape.param(store, layer.w_k),
        tape.param(store, layer.w_v),
        tape.param(store, layer.merge),
    );
    let q = tape.matmul(h_u, wq)?;
    let k = tape.matmul(h_e, wk)?;
    let v = tape.matmul(h_e, wv)?;
    let dh = layer.head_dim;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(layer.heads);
    let mut attention = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, lo, hi)?;
        let qh = tape.reshape(qh, &[q_rows, 1, dh])?;
        let kh = tape.slice(k, lo, hi)?;
        let kh = tape.reshape(kh, &[q_rows, slots, dh])?;
        let kt = tape.transpose(kh)?;
        let logits = tape.bmm(qh, kt)?;
        let logits = tape.reshape(logits, &[q_rows, slots])?;
        let logits = tape.scale(logits, inv)?;
        let att = tape.masked_softmax(logits, keep)?;
        attention.push(att);
        let att = tape.dropout(att, dropout, train, rng)?;
        let att = tape.reshape(att, &[q_rows, 1, slots])?;
        let vh = tape.slice(v, lo, hi)?;
        let vh = tape.reshape(vh, &[q_rows, slots, dh])?;
        let oh = tape.bmm(att, vh)?;
        outs.push(tape.reshape(oh, &[q_rows, dh])?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let out = tape.matmul(cat, wm)?;
    Ok(ConvOutput { out, attention })
}

/// Attention fusion of the two branch embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionLayer {
    pub q: ParamId,
    pub w_tds: ParamId,
    pub b_tds: ParamId,
    pub w_gas: ParamId,
    pub b_gas: ParamId,
}

impl FusionLayer {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        FusionLayer {
            q: store.add(format!("{prefix}.q"), glorot_uniform(&[d], rng)),
            w_tds: store.add(format!("{prefix}.w_tds"), glorot_uniform(&[d, d], rng)),
            b_tds: store.add(format!("{prefix}.b_tds"), Tensor::zeros(&[d])),
            w_gas: store.add(format!("{prefix}.w_gas"), glorot_uniform(&[d, d], rng)),
            b_gas: store.add(format!("{prefix}.b_gas"), Tensor::zeros(&[d])),
        }
    }
}

/// Fused `[Q, d]` embedding and the `[Q, 2]` branch weights `(α^TDS, α^GAS)`.
pub fn fuse(tape: &mut Tape, store: &ParamStore, f: &FusionLayer, h_tds: Var, h_gas: Var) -> Result<(Var, Var)> {
    if tape.shape(h_tds) != tape.shape(h_gas) {
        return Err(DpsError::Contract("fuse: branch embeddings differ in shape".into()));
    }
    let d = tape.shape(h_tds)[1];
    let q = tape.param(store, f.q);
    let q = tape.reshape(q, &[d, 1])?;
    let mut scores = Vec::with_capacity(2);
    for (h, w, b) in [(h_tds, f.w_tds, f.b_tds), (h_gas, f.w_gas, f.b_gas)] {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        let z = tape.sigmoid(z)?;
        scores.push(tape.matmul(z, q)?);
    }
    let logits = tape.concat(&scores, 1)?;
    let alpha = tape.softmax(logits)?;
    let a_tds = tape.slice(alpha, 0, 1)?;
    let a_gas = tape.slice(alpha, 1, 2)?;
    let x = tape.mul(a_tds, h_tds)?;
    let y = tape.mul(a_gas, h_gas)?;
    Ok((tape.add(x, y)?, alpha))
}

/// `sigmoid(W · relu(W_u h_u + W_v h_v))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkHead {
    pub w: ParamId,
    pub w_u: ParamId,
    pub w_v: ParamId,
}

impl LinkHead {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        LinkHead {
            w: store.add(format!("{prefix}.w"), glorot_uniform(&[d, 1], rng)),
            w_u: store.add(format!("{prefix}.w_u"), glorot_uniform(&[d, d], rng)),
            w_v: store.add(format!("{prefix}.w_v"), glorot_uniform(&[d, d], rng)),
        }
    }
}

/// Link probabilities `[Q, 1]` for row-aligned `h_u`, `h_v`.
pub fn predict_link(tape: &mut Tape, store: &ParamStore, head: &LinkHead, h_u: Var, h_v: Var) -> Result<Var> {
    let (w, wu, wv) = (tape.param(store, head.w), tape.param(store, head.w_u), tape.param(store, head.w_v));
    let a = tape.matmul(h_u, wu)?;
    let b = tape.matmul(h_v, wv)?;
    let z = tape.add(a, b)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, w)?;
    Ok(tape.sigmoid(z)?)
}

/// Samplers feeding the two branches. Single-branch modes leave the other
/// slot empty.
#[derive(Clone, Copy)]
pub struct Branches<'a> {
    pub tds: Option<&'a NeighborSampler<'a>>,
    pub gas: Option<&'a NeighborSampler<'a>>,
}

#[derive(Clone, Debug)]
pub struct DpsModel {
    pub hyper: ModelHyper,
    pub store: ParamStore,
    pub table: ParamId,
    pub kernel: TimeKernel,
    pub convs: Vec<ConvLayer>,
    pub fusion: Option<FusionLayer>,
    pub concat_proj: Option<ParamId>,
    pub head: LinkHead,
}

/// One level of the sampled computation tree.
struct Level {
    /// Rows of the level below holding each query's own embedding.
    self_rows: Vec<usize>,
    slots: usize,
    nbr_rows: Vec<Option<usize>>,
    dts: Vec<f64>,
    keep: Vec<bool>,
    feats: Vec<f64>,
}

fn time_key(t: f64) -> u64 {
    t.to_bits()
}

impl DpsModel {
    pub fn new(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = hyper.d_model;
        let table = store.add("dps.node_table", glorot_uniform(&[hyper.num_nodes, d], &mut rng));
        let kernel = TimeKernel::register(&mut store, "dps.time.omega", hyper.d_time);
        let convs = (0..hyper.layers)
            .map(|l| ConvLayer::register(&mut store, &format!("dps.conv{l}"), d, hyper.input_dim(), hyper.heads, &mut rng))
            .collect();
        let (fusion, concat_proj) = match hyper.mode {
            SamplerMode::Dps | SamplerMode::Uniform => (Some(FusionLayer::register(&mut store, "dps.fusion", d, &mut rng)), None),
            SamplerMode::NoFusion => (None, Some(store.add("dps.concat.w", glorot_uniform(&[2 * d, d], &mut rng)))),
            SamplerMode::TdsOnly | SamplerMode::GasOnly => (None, None),
        };
        let head = LinkHead::register(&mut store, "dps.head", d, &mut rng);
        Ok(DpsModel { hyper, store, table, kernel, convs, fusion, concat_proj, head })
    }

    /// Embeddings `[Q, d_model]` at layer `layer` for one sampler branch.
    ///
    /// Sampling happens once per distinct `(node, time)` per layer; padded
    /// slots are masked.
    #[allow(clippy::too_many_arguments)]
    pub fn embed_branch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        g: &TemporalGraph,
        sampler: &NeighborSampler,
        queries: &[(NodeId, f64)],
        layer: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if layer > self.hyper.layers {
            return Err(DpsError::Contract(format!("layer {layer} exceeds model depth {}", self.hyper.layers)));
        }
        for &(u, _) in queries {
            if u >= self.hyper.num_nodes {
                return Err(DpsError::UnknownNode(u));
            }
        }
        let m = self.hyper.edge_dim;
        let mut current: Vec<(NodeId, f64)> = queries.to_vec();
        let mut levels: Vec<Level> = Vec::with_capacity(layer);
        for l in (1..=layer).rev() {
            let mut below: Vec<(NodeId, f64)> = Vec::new();
            let mut index: HashMap<(NodeId, u64), usize> = HashMap::new();
            let mut intern = |u: NodeId, t: f64, below: &mut Vec<(NodeId, f64)>| -> usize {
                // layer-0 rows only depend on the node
                let key = (u, if l == 1 { 0 } else { time_key(t) });
                *index.entry(key).or_insert_with(|| {
                    below.push((u, t));
                    below.len() - 1
                })
            };
            let mut sampled: Vec<Vec<AdjEntry>> = Vec::with_capacity(current.len());
            let mut memo: HashMap<(NodeId, u64), usize> = HashMap::new();
            for &(u, t) in &current {
                memo.entry((u, time_key(t))).or_insert_with(|| {
                    let ns = g.neighbors_before_unchecked(u, t);
                    sampled.push(sampler.sample(&ns, self.hyper.neighbors, rng));
                    sampled.len() - 1
                });
            }
            let slots = sampled.iter().map(Vec::len).max().unwrap_or(0).max(1);
            let mut self_rows = Vec::with_capacity(current.len());
            let mut nbr_rows = Vec::with_capacity(current.len() * slots);
            let mut dts = Vec::with_capacity(current.len() * slots);
            let mut keep = Vec::with_capacity(current.len() * slots);
            let mut feats = Vec::with_capacity(current.len() * slots * m);
            for &(u, t) in &current {
                self_rows.push(intern(u, t, &mut below));
                let entries = &sampled[memo[&(u, time_key(t))]];
                for k in 0..slots {
                    match entries.get(k) {
                        Some(e) => {
                            nbr_rows.push(Some(intern(e.neighbor, e.timestamp, &mut below)));
                            dts.push(t - e.timestamp);
                            keep.push(true);
                            feats.extend_from_slice(g.edge_features(e.edge_id));
                        }
                        None => {
                            nbr_rows.push(None);
                            dts.push(0.0);
                            keep.push(false);
                            feats.extend(std::iter::repeat(0.0).take(m));
                        }
                    }
                }
            }
            levels.push(Level { self_rows, slots, nbr_rows, dts, keep, feats });
            current = below;
        }

        let table = tape.param(&self.store, self.table);
        let nodes: Vec<usize> = current.iter().map(|&(u, _)| u).collect();
        let mut h = tape.gather(table, &nodes)?;
        for (depth, lv) in levels.iter().rev().enumerate() {
            let conv = &self.convs[depth];
            let h_u = tape.gather(h, &lv.self_rows)?;
            let h_n = tape.gather_padded(h, &lv.nbr_rows)?;
            let phi = self.kernel.encode(tape, &self.store, &lv.dts, Some(&lv.keep))?;
            let mut parts = vec![h_n, phi];
            if m > 0 {
                parts.push(tape.constant(Tensor::new(&[lv.keep.len(), m], lv.feats.clone())?));
            }
            let h_e = tape.concat(&parts, 1)?;
            h = conv_forward(tape, &self.store, conv, h_u, h_e, &lv.keep, lv.slots, self.hyper.dropout, train, rng)?.out;
        }
        Ok(h)
    }

    /// Final `[Q, d_model]` embeddings combining the branches per the model's mode.
    pub fn embed<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        g: &TemporalGraph,
        branches: Branches,
        queries: &[(NodeId, f64)],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mode = self.hyper.mode;
        fn need<'s, 'a>(s: Option<&'s NeighborSampler<'a>>, mode: SamplerMode, which: &str) -> Result<&'s NeighborSampler<'a>> {
            s.ok_or_else(|| DpsError::Contract(format!("mode {mode} needs a {which} sampler")))
        }
        let top = self.hyper.layers;
        let fused = match mode {
            SamplerMode::TdsOnly => {
                let s = need(branches.tds, mode, "TDS")?;
                self.embed_branch(tape, g, s, queries, top, train, rng)?
            }
            SamplerMode::GasOnly => {
                let s = need(branches.gas, mode, "GAS")?;
                self.embed_branch(tape, g, s, queries, top, train, rng)?
            }
            _ => {
                let a = self.embed_branch(tape, g, need(branches.tds, mode, "first-branch")?, queries, top, train, rng)?;
                let b = self.embed_branch(tape, g, need(branches.gas, mode, "second-branch")?, queries, top, train, rng)?;
                if mode == SamplerMode::NoFusion {
                    let w = self.concat_proj.ok_or_else(|| DpsError::Contract("missing concat projection".into()))?;
                    let w = tape.param(&self.store, w);
                    let cat = tape.concat(&[a, b], 1)?;
                    tape.matmul(cat, w)?
                } else {
                    let f = self.fusion.ok_or_else(|| DpsError::Contract("missing fusion layer".into()))?;
                    fuse(tape, &self.store, &f, a, b)?.0
                }
            }
        };
        Ok(tape.dropout(fused, self.hyper.dropout, train, rng)?)
    }

    /// Link probabilities for `(src, dst, t)` triples, `[Q, 1]`.
    pub fn score_links<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        g: &TemporalGraph,
        branches: Branches,
        links: &[(NodeId, NodeId, f64)],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut queries = Vec::with_capacity(2 * links.len());
        let mut rows: HashMap<(NodeId, u64), usize> = HashMap::new();
        let mut idx = |u: NodeId, t: f64, queries: &mut Vec<(NodeId, f64)>| {
            *rows.entry((u, time_key(t))).or_insert_with(|| {
                queries.push((u, t));
                queries.len() - 1
            })
        };
        let mut src = Vec::with_capacity(links.len());
        let mut dst = Vec::with_capacity(links.len());
        for &(u, v, t) in links {
            src.push(idx(u, t, &mut queries));
            dst.push(idx(v, t, &mut queries));
        }
        let h = self.embed(tape, g, branches, &queries, train, rng)?;
        let hu = tape.gather(h, &src)?;
        let hv = tape.gather(h, &dst)?;
        predict_link(tape, &self.store, &self.head, hu, hv)
    }

    /// Inference-mode embedding of one `(node, time)` at layer `layer` of a branch.
    pub fn embed_node<R: Rng + ?Sized>(
        &self,
        g: &TemporalGraph,
        sampler: &NeighborSampler,
        u: NodeId,
        t: f64,
        layer: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let h = self.embed_branch(&mut tape, g, sampler, &[(u, t)], layer, false, rng)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Inference-mode final embeddings for a list of `(node, time)` queries.
    pub fn embed_values<R: Rng + ?Sized>(
        &self,
        g: &TemporalGraph,
        branches: Branches,
        queries: &[(NodeId, f64)],
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let h = self.embed(&mut tape, g, branches, queries, false, rng)?;
        let v = tape.value(h);
        Ok((0..queries.len()).map(|i| v.row(i).to_vec()).collect())
    }
}
