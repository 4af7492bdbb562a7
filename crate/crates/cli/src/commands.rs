use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use dps_core::checkpoint::Artifacts;
use dps_core::gas::{pretrain_gas, GasModel};
use dps_core::gradcheck::run_suite;
use dps_core::graph::*;
use dps_core::par::{item_seed, map_indexed};
use dps_core::tds::{fit_all, DecayRates};
use dps_core::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EvalPart, RunConfig};

/// First line of edge lists written by `ingest` and `synth`.
const NORMALIZED_MARKER: &str = "# dps normalized edge list";
const EMBED_CHUNK: usize = 200;
const EMBED_STREAM: u64 = 0x454d_4244;

struct Dataset {
    name: String,
    graph: TemporalGraph,
    split: ChronoSplit,
}

/// Loads the configured dataset. Files carrying the normalized marker are
/// read in their stored time units.
fn load_graph(path: &Path, opts: &LoadOptions) -> Result<TemporalGraph> {
    let mut first = String::new();
    BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?).read_line(&mut first)?;
    let opts = match first.trim().strip_prefix(NORMALIZED_MARKER) {
        Some(rest) => {
            let features = rest.trim().trim_start_matches(';').trim().strip_prefix("features=").unwrap_or("0");
            LoadOptions { has_features: features.parse::<usize>().unwrap_or(0) > 0, time_unit_divisor: 1.0, time_column: 2 }
        }
        None => opts.clone(),
    };
    load_edge_list(path, &opts).with_context(|| format!("loading {}", path.display()))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset()?;
    let graph = load_graph(path, &cfg.load)?;
    let split = chrono_split(&graph, cfg.split_ratios())?;
    let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset { name, graph, split })
}

fn write_normalized(g: &TemporalGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{NORMALIZED_MARKER}; features={}", g.feature_dim())?;
    write_edge_list(g, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(cfg: &RunConfig, file: &str, value: &T) -> Result<()> {
    let path = cfg.out.join(file);
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    command: &'a str,
    dataset: &'a str,
    mode: &'a str,
    accuracy: f64,
    auc: f64,
    epochs: usize,
    seed: u64,
}

fn write_metrics(cfg: &RunConfig, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out.join("metrics.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in rows {
        println!("{} {} {}: accuracy {:.4} auc {:.4} epochs {}", r.command, r.dataset, r.mode, r.accuracy, r.auc, r.epochs);
    }
    Ok(())
}

fn save_artifacts(cfg: &RunConfig, file: &str, art: &Artifacts, g: &TemporalGraph) -> Result<()> {
    let path = cfg.out.join(file);
    art.save(&path, g).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_artifacts(path: &Path, g: &TemporalGraph) -> Result<Artifacts> {
    Artifacts::load(path, Some(g)).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Decay rates from `tds_checkpoint` or a fresh fit.
fn rates_for(cfg: &RunConfig, d: &Dataset) -> Result<DecayRates> {
    match &cfg.tds_checkpoint {
        Some(p) => load_artifacts(p, &d.graph)?.rates.with_context(|| format!("{} holds no decay rates", p.display())),
        None => Ok(fit_all(&d.graph, &d.split, &cfg.train.tds_config())?),
    }
}

/// GAS model from `gas_checkpoint` or a fresh pretraining run.
fn gas_for(cfg: &RunConfig, d: &Dataset) -> Result<GasModel> {
    match &cfg.gas_checkpoint {
        Some(p) => load_artifacts(p, &d.graph)?.gas.with_context(|| format!("{} holds no GAS model", p.display())),
        None => Ok(pretrain_gas(&d.graph, &d.split, &cfg.train.gas_config())?.0),
    }
}

fn eval_examples(cfg: &RunConfig, d: &Dataset) -> Vec<dps_core::sampling::LinkExample> {
    match cfg.part {
        EvalPart::Test => test_examples(&d.graph, &d.split, cfg.train.seed),
        EvalPart::Validation => validation_examples(&d.graph, &d.split, cfg.train.seed),
    }
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let summary = summarize(&d.graph);
    write_normalized(&d.graph, &cfg.out.join("dataset.txt"))?;
    write_json(cfg, "summary.json", &summary)?;
    println!(
        "{}: {} nodes, {} edges, density {:.2}, repetition {:.1}%, timespan {:.2}",
        d.name,
        summary.nodes,
        summary.edges,
        summary.density,
        100.0 * summary.repetition,
        summary.timespan
    );
    println!(
        "split: {} train, {} validation, {} test, {} removed",
        d.split.train.len(),
        d.split.val.len(),
        d.split.test.len(),
        d.split.removed.len()
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let sg = synth_generate(&cfg.synth)?;
    write_normalized(&sg.graph, &cfg.out.join("dataset.txt"))?;
    let mut w = BufWriter::new(File::create(cfg.out.join("communities.txt"))?);
    for (u, c) in sg.community.iter().enumerate() {
        writeln!(w, "{} {c}", sg.graph.node_name(u))?;
    }
    w.flush()?;
    println!("wrote {} ({} nodes, {} edges)", cfg.out.join("dataset.txt").display(), sg.graph.num_nodes(), sg.graph.num_edges());
    Ok(())
}

pub fn fit_tds(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let rates = fit_all(&d.graph, &d.split, &cfg.train.tds_config())?;
    let fitted = rates.fitted.iter().filter(|&&f| f).count();
    println!("fitted {fitted}/{} nodes, fallback rate {:.6}", rates.lambda.len(), rates.fallback_lambda);
    save_artifacts(cfg, "tds.json", &Artifacts { rates: Some(rates), ..Artifacts::default() }, &d.graph)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let (model, report) = pretrain_gas(&d.graph, &d.split, &cfg.train.gas_config())?;
    println!("best validation auc {:.4} at epoch {}", report.best_val_auc, report.best_epoch);
    write_json(cfg, "gas_report.json", &report)?;
    save_artifacts(cfg, "gas.json", &Artifacts { gas: Some(model), ..Artifacts::default() }, &d.graph)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    validation: &'a EvalReport,
    test: &'a EvalReport,
    usage: &'a SamplerUsage,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let mode = cfg.train.sampler_mode;
    let rates = if mode.uses_tds() { Some(rates_for(cfg, &d)?) } else { None };
    let gas = if mode.uses_gas() { Some(gas_for(cfg, &d)?) } else { None };
    let out = train_dps(&d.graph, &d.split, rates.as_ref(), gas.as_ref(), &cfg.train)?;
    let scorer = gas.as_ref().map(|m| m.scorer(&d.graph)).transpose()?;
    let samplers = SamplerSet::new(mode, rates.as_ref(), scorer.as_ref())?;
    let test = evaluate_links(&out.model, &d.graph, &samplers, &eval_examples(cfg, &d), cfg.execution(), cfg.train.seed)?;
    write_json(cfg, "report.json", &TrainReport { validation: &out.report, test: &test, usage: &out.usage })?;
    write_metrics(
        cfg,
        &[MetricsRow {
            command: "train",
            dataset: &d.name,
            mode: mode.name(),
            accuracy: test.accuracy,
            auc: test.auc,
            epochs: out.report.epochs,
            seed: cfg.train.seed,
        }],
    )?;
    save_artifacts(cfg, "model.json", &Artifacts { dps: Some(out.model), gas, rates }, &d.graph)
}

/// Checkpoint named by `checkpoint`, with sampler slots filled from the
/// sampler checkpoints when missing.
fn model_artifacts(cfg: &RunConfig, d: &Dataset) -> Result<Artifacts> {
    let path = cfg.checkpoint.as_deref().context("no model checkpoint given (use --checkpoint)")?;
    let mut art = load_artifacts(path, &d.graph)?;
    for extra in [&cfg.tds_checkpoint, &cfg.gas_checkpoint].into_iter().flatten() {
        art = art.merge(load_artifacts(extra, &d.graph)?);
    }
    if art.dps.is_none() {
        bail!("{} holds no DPS model", path.display());
    }
    Ok(art)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let art = model_artifacts(cfg, &d)?;
    let model = art.dps.as_ref().expect("checked in model_artifacts");
    let mode = model.hyper.mode;
    let scorer = art.gas.as_ref().filter(|_| mode.uses_gas()).map(|m| m.scorer(&d.graph)).transpose()?;
    let samplers = SamplerSet::new(mode, art.rates.as_ref().filter(|_| mode.uses_tds()), scorer.as_ref())?;
    let report = evaluate_links(model, &d.graph, &samplers, &eval_examples(cfg, &d), cfg.execution(), cfg.train.seed)?;
    let mut rows = vec![MetricsRow {
        command: "evaluate",
        dataset: &d.name,
        mode: mode.name(),
        accuracy: report.accuracy,
        auc: report.auc,
        epochs: 0,
        seed: cfg.train.seed,
    }];
    let node = match &cfg.labels {
        Some(path) => {
            let labels = load_labels(path, &d.graph).with_context(|| format!("loading labels {}", path.display()))?;
            Some(train_node_classifier(model, &d.graph, &samplers, &labels, &d.split, &cfg.classifier)?.1)
        }
        None => None,
    };
    if let Some(r) = &node {
        rows.push(MetricsRow {
            command: "evaluate",
            dataset: &d.name,
            mode: "node_classification",
            accuracy: r.accuracy,
            auc: r.auc,
            epochs: r.epochs,
            seed: cfg.train.seed,
        });
        write_json(cfg, "node_classification.json", r)?;
    }
    write_json(cfg, "report.json", &report)?;
    write_metrics(cfg, &rows)
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let res = ablation_run(&d.graph, &d.split, &cfg.train)?;
    write_json(cfg, "ablation.json", &res.rows)?;
    let rows: Vec<MetricsRow> = res
        .rows
        .iter()
        .map(|r| MetricsRow {
            command: "ablate",
            dataset: &d.name,
            mode: r.mode.name(),
            accuracy: r.test.accuracy,
            auc: r.test.auc,
            epochs: r.test.epochs,
            seed: cfg.train.seed,
        })
        .collect();
    write_metrics(cfg, &rows)?;
    let gas = res.gas.map(|g| g.0);
    for (row, model) in res.rows.iter().zip(res.models) {
        let art = Artifacts {
            dps: Some(model),
            gas: gas.clone().filter(|_| row.mode.uses_gas()),
            rates: res.rates.clone().filter(|_| row.mode.uses_tds()),
        };
        save_artifacts(cfg, &format!("model_{}.json", row.mode.name()), &art, &d.graph)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    axis: String,
    value: f64,
    mode: &'a str,
    accuracy: f64,
    auc: f64,
    epochs: usize,
    seed: u64,
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let axis = cfg.sweep.axis.context("no sweep axis given (use --axis)")?;
    let values = if cfg.sweep.values.is_empty() { axis.default_values() } else { cfg.sweep.values.clone() };
    let d = load_dataset(cfg)?;
    let mode = cfg.train.sampler_mode;
    let mut settings = Vec::with_capacity(values.len());
    for &v in &values {
        let mut t = cfg.train.clone();
        axis.apply(&mut t, v)?;
        t.validate()?;
        settings.push(t);
    }
    let results = map_indexed(cfg.execution(), &settings, |_, t| run_modes(&d.graph, &d.split, t, &[mode]));
    let mut sweep_rows = Vec::new();
    let mut metric_rows = Vec::new();
    for (v, r) in values.iter().zip(results) {
        let row = r?.rows.remove(0);
        sweep_rows.push(SweepRow {
            axis: axis.to_string(),
            value: *v,
            mode: mode.name(),
            accuracy: row.test.accuracy,
            auc: row.test.auc,
            epochs: row.test.epochs,
            seed: cfg.train.seed,
        });
        metric_rows.push(MetricsRow {
            command: "sweep",
            dataset: &d.name,
            mode: mode.name(),
            accuracy: row.test.accuracy,
            auc: row.test.auc,
            epochs: row.test.epochs,
            seed: cfg.train.seed,
        });
    }
    let mut w = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    for r in &sweep_rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in &sweep_rows {
        println!("{} = {}: auc {:.4} accuracy {:.4}", r.axis, r.value, r.auc, r.accuracy);
    }
    let mut m = csv::Writer::from_path(cfg.out.join("metrics.csv"))?;
    for r in &metric_rows {
        m.serialize(r)?;
    }
    m.flush()?;
    Ok(())
}

/// Reads `node_id timestamp` lines; timestamps are in the dataset's raw units.
fn read_queries(path: &Path, g: &TemporalGraph) -> Result<Vec<(NodeId, String, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = if line.contains(',') { line.split(',').map(str::trim).collect() } else { line.split_whitespace().collect() };
        let [name, ts, ..] = fields[..] else {
            bail!("{}:{}: expected `node_id timestamp`", path.display(), i + 1);
        };
        let Some(node) = g.node_id(name) else {
            bail!("{}:{}: unknown node {name:?}", path.display(), i + 1);
        };
        let t: f64 = ts.parse().with_context(|| format!("{}:{}: invalid timestamp {ts:?}", path.display(), i + 1))?;
        out.push((node, ts.to_string(), (t - g.time_origin) / g.time_scale));
    }
    Ok(out)
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let art = model_artifacts(cfg, &d)?;
    let model = art.dps.as_ref().expect("checked in model_artifacts");
    let mode = model.hyper.mode;
    let scorer = art.gas.as_ref().filter(|_| mode.uses_gas()).map(|m| m.scorer(&d.graph)).transpose()?;
    let samplers = SamplerSet::new(mode, art.rates.as_ref().filter(|_| mode.uses_tds()), scorer.as_ref())?;
    let queries = read_queries(cfg.queries.as_deref().context("no query file given (use --queries)")?, &d.graph)?;
    let path = cfg.out.join("embeddings.txt");
    let mut w = BufWriter::new(File::create(&path)?);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.train.seed, EMBED_STREAM));
    for chunk in queries.chunks(EMBED_CHUNK) {
        let q: Vec<(NodeId, f64)> = chunk.iter().map(|(u, _, t)| (*u, *t)).collect();
        for ((u, raw, _), h) in chunk.iter().zip(model.embed_values(&d.graph, samplers.branches(), &q, &mut rng)?) {
            write!(w, "{} {raw}", d.graph.node_name(*u))?;
            for x in h {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    println!("wrote {} embeddings to {}", queries.len(), path.display());
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let report = run_suite(cfg.train.seed)?;
    let mut w = csv::Writer::from_path(cfg.out.join("gradcheck.csv"))?;
    for row in &report.rows {
        w.serialize(row)?;
        if !row.passed {
            println!("FAILED {}/{}: relative error {:.3e}", row.group, row.name, row.rel_error);
        }
    }
    w.flush()?;
    println!(
        "{} tensors checked, max relative error {:.3e}: {}",
        report.rows.len(),
        report.max_rel_error,
        if report.passed { "passed" } else { "FAILED" }
    );
    Ok(report.passed)
}
