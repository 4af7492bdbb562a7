//! Temporal interaction store: loading, chronological adjacency, splits,
//! negative sampling and a planted-preference generator.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{DpsError, Result};

pub type NodeId = usize;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// One interaction before indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub edge_id: usize,
}

/// One side of an interaction as seen from a node's adjacency list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjEntry {
    pub neighbor: NodeId,
    pub timestamp: f64,
    pub edge_id: usize,
}

/// Immutable time-indexed interaction store.
///
/// Edges are sorted by timestamp with ties kept in input order, and
/// `edge_id` is the position in that order. Every interaction appears in the
/// adjacency of both endpoints.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    num_nodes: usize,
    edges: Vec<TemporalEdge>,
    features: Vec<f64>,
    feature_dim: usize,
    adjacency: Vec<Vec<AdjEntry>>,
    names: Vec<String>,
    name_index: HashMap<String, NodeId>,
    pub time_origin: f64,
    pub time_scale: f64,
}

/// All interactions of `anchor_node` strictly before `anchor_time`.
#[derive(Clone, Copy, Debug)]
pub struct NeighborSet<'a> {
    pub anchor_node: NodeId,
    pub anchor_time: f64,
    pub entries: &'a [AdjEntry],
}

impl NeighborSet<'_> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TemporalGraph {
    /// Builds the store from interactions whose node ids are `< num_nodes`.
    pub fn new(num_nodes: usize, mut interactions: Vec<Interaction>) -> Result<Self> {
        let feature_dim = interactions.first().map_or(0, |i| i.features.len());
        for (k, it) in interactions.iter().enumerate() {
            if it.features.len() != feature_dim {
                return Err(DpsError::Format(format!(
                    "interaction {k} has {} features, expected {feature_dim}",
                    it.features.len()
                )));
            }
            if it.src >= num_nodes || it.dst >= num_nodes {
                return Err(DpsError::UnknownNode(it.src.max(it.dst)));
            }
            if !it.timestamp.is_finite() {
                return Err(DpsError::Format(format!("interaction {k} has a non-finite timestamp")));
            }
        }
        // stable: equal timestamps keep input order
        interactions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

        let mut edges = Vec::with_capacity(interactions.len());
        let mut features = Vec::with_capacity(interactions.len() * feature_dim);
        let mut adjacency = vec![Vec::new(); num_nodes];
        for (edge_id, it) in interactions.into_iter().enumerate() {
            edges.push(TemporalEdge {
                src: it.src,
                dst: it.dst,
                timestamp: it.timestamp,
                edge_id,
            });
            features.extend_from_slice(&it.features);
            adjacency[it.src].push(AdjEntry {
                neighbor: it.dst,
                timestamp: it.timestamp,
                edge_id,
            });
            adjacency[it.dst].push(AdjEntry {
                neighbor: it.src,
                timestamp: it.timestamp,
                edge_id,
            });
        }
        let names: Vec<String> = (0..num_nodes).map(|i| i.to_string()).collect();
        let name_index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(TemporalGraph {
            num_nodes,
            edges,
            features,
            feature_dim,
            adjacency,
            names,
            name_index,
            time_origin: 0.0,
            time_scale: 1.0,
        })
    }

    /// Replaces the default `"0".."n-1"` node names.
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_nodes {
            return Err(DpsError::Format(format!(
                "{} names for {} nodes",
                names.len(),
                self.num_nodes
            )));
        }
        self.name_index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        self.names = names;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    pub fn edge(&self, edge_id: usize) -> &TemporalEdge {
        &self.edges[edge_id]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn edge_features(&self, edge_id: usize) -> &[f64] {
        &self.features[edge_id * self.feature_dim..(edge_id + 1) * self.feature_dim]
    }

    pub fn adjacency(&self, u: NodeId) -> &[AdjEntry] {
        &self.adjacency[u]
    }

    pub fn node_name(&self, u: NodeId) -> &str {
        &self.names[u]
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.name_index.get(name).copied()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn timespan(&self) -> f64 {
        match (self.edges.first(), self.edges.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    /// Adjacency entries of `u` with timestamp strictly below `t`.
    pub fn neighbors_before(&self, u: NodeId, t: f64) -> Result<NeighborSet<'_>> {
        if u >= self.num_nodes {
            return Err(DpsError::UnknownNode(u));
        }
        Ok(self.neighbors_before_unchecked(u, t))
    }

    pub(crate) fn neighbors_before_unchecked(&self, u: NodeId, t: f64) -> NeighborSet<'_> {
        let adj = &self.adjacency[u];
        let end = adj.partition_point(|e| e.timestamp < t);
        NeighborSet {
            anchor_node: u,
            anchor_time: t,
            entries: &adj[..end],
        }
    }

    /// SHA-256 over node count, edge endpoints, timestamps and features.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_nodes as u64).to_le_bytes());
        for e in &self.edges {
            h.update((e.src as u64).to_le_bytes());
            h.update((e.dst as u64).to_le_bytes());
            h.update(e.timestamp.to_bits().to_le_bytes());
        }
        for f in &self.features {
            h.update(f.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Columns after the timestamp are edge features.
    pub has_features: bool,
    /// Raw time units per output unit; 86400 turns seconds into days.
    pub time_unit_divisor: f64,
    /// Zero-based column holding the timestamp.
    pub time_column: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            has_features: false,
            time_unit_divisor: SECONDS_PER_DAY,
            time_column: 2,
        }
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Reads a delimiter-separated edge list (`src dst timestamp [features..]`).
///
/// Lines starting with `%` or `#` are comments. A first data line whose
/// timestamp column is not numeric is treated as a header.
pub fn load_edge_list(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<TemporalGraph> {
    let file = File::open(path)?;
    read_edge_list(BufReader::new(file), opts)
}

pub fn read_edge_list<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<TemporalGraph> {
    if !(opts.time_unit_divisor > 0.0) {
        return Err(DpsError::Format("time_unit_divisor must be positive".into()));
    }
    let tc = opts.time_column;
    if tc < 2 {
        return Err(DpsError::Format("time_column must come after src and dst".into()));
    }
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, NodeId> = HashMap::new();
    let mut raw: Vec<Interaction> = Vec::new();
    let mut arity: Option<usize> = None;
    let mut seen_data = false;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        if fields.len() <= tc {
            return Err(DpsError::Parse {
                line: lineno,
                msg: format!("expected at least {} fields, found {}", tc + 1, fields.len()),
            });
        }
        let ts = match fields[tc].parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ if !seen_data => {
                seen_data = true;
                continue;
            }
            _ => {
                return Err(DpsError::Parse {
                    line: lineno,
                    msg: format!("invalid timestamp {:?}", fields[tc]),
                })
            }
        };
        seen_data = true;
        let features = if opts.has_features {
            let feats = fields[tc + 1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| DpsError::Parse {
                        line: lineno,
                        msg: format!("invalid feature {f:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match arity {
                None => arity = Some(feats.len()),
                Some(a) if a != feats.len() => {
                    return Err(DpsError::Format(format!(
                        "line {lineno}: {} features, expected {a}",
                        feats.len()
                    )))
                }
                _ => {}
            }
            feats
        } else {
            Vec::new()
        };
        let mut id_of = |name: &str| {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() - 1
            })
        };
        let src = id_of(fields[0]);
        let dst = id_of(fields[1]);
        raw.push(Interaction {
            src,
            dst,
            timestamp: ts,
            features,
        });
    }

    let origin = raw.iter().map(|i| i.timestamp).fold(f64::INFINITY, f64::min);
    let origin = if origin.is_finite() { origin } else { 0.0 };
    for it in &mut raw {
        it.timestamp = (it.timestamp - origin) / opts.time_unit_divisor;
    }
    let mut g = TemporalGraph::new(names.len(), raw)?.with_names(names)?;
    g.time_origin = origin;
    g.time_scale = opts.time_unit_divisor;
    Ok(g)
}

/// Rounds to 9 significant digits and prints the shortest exact form.
fn fmt9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    format!("{rounded}")
}

/// Writes `src dst timestamp [features..]` in normalized time units; reload
/// with `time_unit_divisor = 1`.
pub fn write_edge_list<W: Write>(g: &TemporalGraph, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    for e in &g.edges {
        write!(w, "{} {} {}", g.node_name(e.src), g.node_name(e.dst), fmt9(e.timestamp))?;
        for f in g.edge_features(e.edge_id) {
            write!(w, " {}", fmt9(*f))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_edge_list(g: &TemporalGraph, path: impl AsRef<Path>) -> Result<()> {
    write_edge_list(g, File::create(path)?)
}

/// Chronological partition of edge ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChronoSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Validation/test edges touching a node that never occurs in training.
    pub removed: Vec<usize>,
    /// `train_nodes[u]` is true when `u` appears in a training edge.
    pub train_nodes: Vec<bool>,
}

impl ChronoSplit {
    pub fn is_train(&self, edge_id: usize) -> bool {
        // train ids are a contiguous prefix of the time order
        self.train.last().is_some_and(|&last| edge_id <= last)
    }
}

/// Splits the time-ordered edges at `⌊r_train·|E|⌋` and `⌊(r_train+r_val)·|E|⌋`.
pub fn chrono_split(g: &TemporalGraph, ratios: (f64, f64, f64)) -> Result<ChronoSplit> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(DpsError::Split(format!("ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = g.num_edges();
    if n < 3 {
        return Err(DpsError::Split(format!("need at least 3 edges, have {n}")));
    }
    let cut1 = ((rt * n as f64) + 1e-9).floor() as usize;
    let cut2 = (((rt + rv) * n as f64) + 1e-9).floor() as usize;

    let mut train_nodes = vec![false; g.num_nodes()];
    for e in &g.edges[..cut1] {
        train_nodes[e.src] = true;
        train_nodes[e.dst] = true;
    }
    let mut split = ChronoSplit {
        train: (0..cut1).collect(),
        ..Default::default()
    };
    for e in &g.edges[cut1..] {
        let seen = train_nodes[e.src] && train_nodes[e.dst];
        if !seen {
            split.removed.push(e.edge_id);
        } else if e.edge_id < cut2 {
            split.val.push(e.edge_id);
        } else {
            split.test.push(e.edge_id);
        }
    }
    split.train_nodes = train_nodes;
    Ok(split)
}

/// Uniform node excluding both endpoints of `positive`. If that leaves no
/// candidate, only `positive.dst` is excluded.
pub fn sample_negative<R: Rng + ?Sized>(g: &TemporalGraph, positive: &TemporalEdge, rng: &mut R) -> NodeId {
    sample_negative_for(g.num_nodes(), positive.src, positive.dst, rng)
}

pub(crate) fn sample_negative_for<R: Rng + ?Sized>(n: usize, src: NodeId, dst: NodeId, rng: &mut R) -> NodeId {
    let excluded = if src == dst { 1 } else { 2 };
    if n > excluded {
        loop {
            let j = rng.gen_range(0..n);
            if j != src && j != dst {
                return j;
            }
        }
    }
    if n <= 1 {
        return 0;
    }
    loop {
        let j = rng.gen_range(0..n);
        if j != dst {
            return j;
        }
    }
}

/// Parameters of the planted-preference generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_communities: usize,
    pub decay_rate: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_nodes: 500,
            num_edges: 20_000,
            num_communities: 10,
            decay_rate: 0.005,
            seed: 7,
        }
    }
}

/// Probability that an event follows the source's community preference.
pub const SYNTH_PREFERENCE_PROB: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct SynthGraph {
    pub graph: TemporalGraph,
    pub community: Vec<usize>,
}

/// Planted-preference generator.
///
/// Nodes get uniformly random communities. Event times follow a unit-rate
/// Poisson process. Each event draws its source uniformly; with probability
/// [`SYNTH_PREFERENCE_PROB`] the destination is a member of the source's
/// community chosen with weight `exp(-decay_rate * (t - last))`, where
/// `last` is the pair's most recent contact (time 0 for pairs that never
/// met). Otherwise the destination is uniform over all other nodes.
pub fn synth_generate(params: &SynthParams) -> Result<SynthGraph> {
    let SynthParams {
        num_nodes,
        num_edges,
        num_communities,
        decay_rate,
        seed,
    } = *params;
    if num_nodes < 2 || num_communities == 0 || num_edges == 0 || !(decay_rate > 0.0) {
        return Err(DpsError::Config(format!("invalid synth parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let community: Vec<usize> = (0..num_nodes).map(|_| rng.gen_range(0..num_communities)).collect();
    let mut members: Vec<Vec<NodeId>> = vec![Vec::new(); num_communities];
    for (u, &c) in community.iter().enumerate() {
        members[c].push(u);
    }
    // per-node last contact time with each partner
    let mut last: Vec<HashMap<NodeId, f64>> = vec![HashMap::new(); num_nodes];
    let mut interactions = Vec::with_capacity(num_edges);
    let mut t = 0.0f64;
    let mut weights: Vec<f64> = Vec::new();
    for _ in 0..num_edges {
        t += -(1.0 - rng.gen::<f64>()).ln();
        let src = rng.gen_range(0..num_nodes);
        let pool = &members[community[src]];
        let dst = if rng.gen::<f64>() < SYNTH_PREFERENCE_PROB && pool.len() > 1 {
            weights.clear();
            // shift by the newest contact so the largest weight is 1
            let newest = pool
                .iter()
                .filter(|&&w| w != src)
                .map(|w| last[src].get(w).copied().unwrap_or(0.0))
                .fold(f64::NEG_INFINITY, f64::max);
            for &w in pool {
                let lw = if w == src {
                    f64::NEG_INFINITY
                } else {
                    last[src].get(&w).copied().unwrap_or(0.0)
                };
                weights.push((decay_rate * (lw - newest)).exp());
            }
            let total: f64 = weights.iter().sum();
            let mut x = rng.gen::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if x < *w {
                    pick = i;
                    break;
                }
                x -= w;
            }
            if pool[pick] == src {
                // only reachable through rounding in the tail
                *pool.iter().rev().find(|&&w| w != src).unwrap()
            } else {
                pool[pick]
            }
        } else {
            let mut j = rng.gen_range(0..num_nodes - 1);
            if j >= src {
                j += 1;
            }
            j
        };
        last[src].insert(dst, t);
        last[dst].insert(src, t);
        interactions.push(Interaction {
            src,
            dst,
            timestamp: t,
            features: Vec::new(),
        });
    }
    let graph = TemporalGraph::new(num_nodes, interactions)?;
    Ok(SynthGraph { graph, community })
}

/// A labelled node event for temporal node classification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelEvent {
    pub node: NodeId,
    pub timestamp: f64,
    pub label: u8,
}

/// Reads `node_id timestamp label` lines; timestamps are normalized with the
/// graph's origin and scale.
pub fn load_labels(path: impl AsRef<Path>, g: &TemporalGraph) -> Result<Vec<LabelEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen_data = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') || trimmed.starts_with('#') {
            continue;
        }
        let f = split_fields(trimmed);
        if f.len() < 3 {
            return Err(DpsError::Parse {
                line: lineno,
                msg: "expected `node_id timestamp label`".into(),
            });
        }
        let Ok(ts) = f[1].parse::<f64>() else {
            if !seen_data {
                seen_data = true;
                continue;
            }
            return Err(DpsError::Parse {
                line: lineno,
                msg: format!("invalid timestamp {:?}", f[1]),
            });
        };
        seen_data = true;
        let label = match f[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DpsError::Parse {
                    line: lineno,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let node = g.node_id(f[0]).ok_or_else(|| DpsError::Parse {
            line: lineno,
            msg: format!("unknown node {:?}", f[0]),
        })?;
        out.push(LabelEvent {
            node,
            timestamp: (ts - g.time_origin) / g.time_scale,
            label,
        });
    }
    Ok(out)
}

/// Summary statistics in the shape of a dataset table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    /// `|V|(|V|-1) / (2|E|)`
    pub density: f64,
    /// Fraction of interactions whose node pair interacted earlier.
    pub repetition: f64,
    pub timespan: f64,
}

pub fn summarize(g: &TemporalGraph) -> GraphSummary {
    let n = g.num_nodes() as f64;
    let m = g.num_edges();
    let mut seen: HashSet<(NodeId, NodeId)> = HashSet::new();
    let mut repeats = 0usize;
    for e in g.edges() {
        let key = (e.src.min(e.dst), e.src.max(e.dst));
        if !seen.insert(key) {
            repeats += 1;
        }
    }
    GraphSummary {
        nodes: g.num_nodes(),
        edges: m,
        density: if m == 0 { 0.0 } else { n * (n - 1.0) / (2.0 * m as f64) },
        repetition: if m == 0 { 0.0 } else { repeats as f64 / m as f64 },
        timespan: g.timespan(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(s: &str, opts: &LoadOptions) -> Result<TemporalGraph> {
        read_edge_list(s.as_bytes(), opts)
    }

    #[test]
    fn loads_and_normalizes_seconds() {
        let g = load_str("a b 100\nb c 50\nc a 75\na c 50\nb a 200\n", &LoadOptions::default()).unwrap();
        let ts: Vec<f64> = g.edges().iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![0.0, 0.0, 25.0 / 86400.0, 50.0 / 86400.0, 150.0 / 86400.0]);
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.time_origin, 50.0);
        // ties keep file order
        assert_eq!(g.node_name(g.edges()[0].src), "b");
        assert_eq!(g.node_name(g.edges()[1].src), "a");
        let total: usize = (0..3).map(|u| g.adjacency(u).len()).sum();
        assert_eq!(total, 2 * g.num_edges());
    }

    #[test]
    fn empty_file_gives_empty_graph() {
        let g = load_str("", &LoadOptions::default()).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges()), (0, 0));
    }

    #[test]
    fn header_comments_and_commas() {
        let s = "% comment\nsrc,dst,ts\n1,2,10\n2,3,20\n";
        let g = load_str(s, &LoadOptions { time_unit_divisor: 1.0, ..Default::default() }).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.edges()[1].timestamp, 10.0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load_str("a b 1\na b\n", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DpsError::Parse { line: 2, .. }), "{err}");
        let err = load_str("a b 1\na b x\n", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DpsError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn inconsistent_feature_arity_is_a_format_error() {
        let opts = LoadOptions { has_features: true, ..Default::default() };
        let err = load_str("a b 1 0.5 0.2\na c 2 0.1\n", &opts).unwrap_err();
        assert!(matches!(err, DpsError::Format(_)));
        let g = load_str("a b 1 0.5 0.2\na c 2 0.1 0.3\n", &opts).unwrap();
        assert_eq!(g.feature_dim(), 2);
        assert_eq!(g.edge_features(1), &[0.1, 0.3]);
    }

    /// The example of node U's preference structure: (A,V,t0),(B,W,t0),(U,A,t1),(U,B,t1),(U,V,t2).
    fn figure_graph() -> TemporalGraph {
        load_str(
            "A V 0\nB W 0\nU A 1\nU B 1\nU V 2\n",
            &LoadOptions { time_unit_divisor: 1.0, ..Default::default() },
        )
        .unwrap()
    }

    fn names(g: &TemporalGraph, ns: &NeighborSet) -> Vec<(String, f64)> {
        ns.entries.iter().map(|e| (g.node_name(e.neighbor).to_string(), e.timestamp)).collect()
    }

    #[test]
    fn neighbors_before_follows_strict_time() {
        let g = figure_graph();
        let u = g.node_id("U").unwrap();
        let v = g.node_id("V").unwrap();
        let ns = g.neighbors_before(u, 3.0).unwrap();
        assert_eq!(names(&g, &ns), vec![("A".into(), 1.0), ("B".into(), 1.0), ("V".into(), 2.0)]);
        assert!(g.neighbors_before(u, 1.0).unwrap().is_empty());
        let ns = g.neighbors_before(v, 3.0).unwrap();
        assert_eq!(names(&g, &ns), vec![("A".into(), 0.0), ("U".into(), 2.0)]);
        assert!(matches!(g.neighbors_before(99, 1.0), Err(DpsError::UnknownNode(99))));
    }

    fn line_graph(n_edges: usize) -> TemporalGraph {
        let its = (0..n_edges)
            .map(|i| Interaction { src: i % 4, dst: (i + 1) % 4, timestamp: i as f64, features: vec![] })
            .collect();
        TemporalGraph::new(4, its).unwrap()
    }

    #[test]
    fn split_sizes_use_floor() {
        let g = line_graph(20);
        let s = chrono_split(&g, (0.70, 0.15, 0.15)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
        assert!(s.removed.is_empty());
        assert!(chrono_split(&line_graph(2), (0.7, 0.15, 0.15)).is_err());
        assert!(chrono_split(&g, (0.7, 0.2, 0.2)).is_err());
    }

    #[test]
    fn late_node_edges_are_removed() {
        let mut its: Vec<Interaction> = (0..19)
            .map(|i| Interaction { src: i % 3, dst: (i + 1) % 3, timestamp: i as f64, features: vec![] })
            .collect();
        its.push(Interaction { src: 0, dst: 3, timestamp: 19.0, features: vec![] });
        let g = TemporalGraph::new(4, its).unwrap();
        let s = chrono_split(&g, (0.70, 0.15, 0.15)).unwrap();
        assert_eq!(s.removed, vec![19]);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn negative_sampling_edge_cases() {
        let g = TemporalGraph::new(2, vec![Interaction { src: 0, dst: 1, timestamp: 0.0, features: vec![] }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_negative(&g, &g.edges()[0], &mut rng), 0);
        }
        let g = line_graph(10);
        for _ in 0..200 {
            let e = g.edges()[3];
            let j = sample_negative(&g, &e, &mut rng);
            assert!(j != e.dst && j != e.src);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let p = SynthParams { num_nodes: 50, num_edges: 500, num_communities: 3, decay_rate: 0.05, seed: 3 };
        let a = synth_generate(&p).unwrap();
        let b = synth_generate(&p).unwrap();
        assert_eq!(a.graph.edges(), b.graph.edges());
        assert_eq!(a.community, b.community);
        assert_eq!(a.graph.fingerprint(), b.graph.fingerprint());
    }

    #[test]
    fn summary_counts_repeated_pairs() {
        let g = figure_graph();
        let s = summarize(&g);
        assert_eq!(s.repetition, 0.0);
        let g = load_str("a b 1\nb a 2\na c 3\na b 4\n", &LoadOptions { time_unit_divisor: 1.0, ..Default::default() }).unwrap();
        assert_eq!(summarize(&g).repetition, 0.5);
        assert_eq!(summarize(&g).density, 3.0 * 2.0 / 8.0);
    }
}
