//! `dps`: temporal link prediction with learned neighborhood samplers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dps_core::model::SamplerMode;

use config::{EvalPart, RunConfig, SweepAxis};

#[derive(Parser, Debug)]
#[command(name = "dps", version, about = "Temporal link prediction with TDS/GAS neighborhood samplers and attention fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run everything sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Edge list (`src dst timestamp [features..]`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Sampler variant: DPS, TDS_only, GAS_only, no_fusion or uniform.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SamplerMode>,
    /// Reuse decay rates from a checkpoint.
    #[arg(long)]
    tds: Option<PathBuf>,
    /// Reuse a pretrained GAS model from a checkpoint.
    #[arg(long)]
    gas: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize an edge list and print its summary statistics.
    Ingest {
        /// Raw time units per day-like unit (default 86400).
        #[arg(long)]
        time_divisor: Option<f64>,
        /// Zero-based timestamp column.
        #[arg(long)]
        time_column: Option<usize>,
        /// Columns after the timestamp are edge features.
        #[arg(long)]
        features: bool,
    },
    /// Generate a planted-preference graph.
    Synth {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        edges: Option<usize>,
        #[arg(long)]
        communities: Option<usize>,
        #[arg(long)]
        decay: Option<f64>,
    },
    /// Fit per-node decay rates.
    FitTds,
    /// Pretrain the Gumbel attention sampler.
    PretrainGas,
    /// Train a model and report test metrics.
    Train(ModelArgs),
    /// Evaluate a saved model.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        part: Option<EvalPart>,
        /// Node label events for a node classification run.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train and test all five sampler variants.
    Ablate(ModelArgs),
    /// Vary one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        /// Comma-separated settings; defaults to the axis grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Dump temporal embeddings for `node_id timestamp` queries.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn parse_mode(s: &str) -> Result<SamplerMode, String> {
    SamplerMode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = SamplerMode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}, expected one of {}", names.join(", "))
    })
}

fn apply_model_args(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(mode) = m.mode {
        cfg.train.sampler_mode = mode;
    }
    if let Some(p) = &m.tds {
        cfg.tds_checkpoint = Some(p.clone());
    }
    if let Some(p) = &m.gas {
        cfg.gas_checkpoint = Some(p.clone());
    }
    if let Some(e) = m.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = m.lr {
        cfg.train.lr = lr;
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    cfg.deterministic |= c.deterministic;
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.dataset = Some(d.clone());
    }
    match &cli.command {
        Command::Ingest { time_divisor, time_column, features } => {
            if let Some(v) = time_divisor {
                cfg.load.time_unit_divisor = *v;
            }
            if let Some(v) = time_column {
                cfg.load.time_column = *v;
            }
            cfg.load.has_features |= *features;
        }
        Command::Synth { nodes, edges, communities, decay } => {
            let s = &mut cfg.synth;
            s.num_nodes = nodes.unwrap_or(s.num_nodes);
            s.num_edges = edges.unwrap_or(s.num_edges);
            s.num_communities = communities.unwrap_or(s.num_communities);
            s.decay_rate = decay.unwrap_or(s.decay_rate);
        }
        Command::Train(m) | Command::Ablate(m) => apply_model_args(&mut cfg, m),
        Command::Sweep { axis, values, model } => {
            apply_model_args(&mut cfg, model);
            if axis.is_some() {
                cfg.sweep.axis = *axis;
            }
            if !values.is_empty() {
                cfg.sweep.values = values.clone();
            }
        }
        Command::Evaluate { checkpoint, part, labels } => {
            cfg.checkpoint = checkpoint.clone().or(cfg.checkpoint);
            cfg.part = part.unwrap_or(cfg.part);
            cfg.labels = labels.clone().or(cfg.labels);
        }
        Command::Embed { checkpoint, queries } => {
            cfg.checkpoint = checkpoint.clone().or(cfg.checkpoint);
            cfg.queries = queries.clone().or(cfg.queries);
        }
        Command::FitTds | Command::PretrainGas | Command::Gradcheck => {}
    }
    cfg.resolve()
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = build_config(cli)?;
    cfg.write_resolved()?;
    match cli.command {
        Command::Ingest { .. } => commands::ingest(&cfg)?,
        Command::Synth { .. } => commands::synth(&cfg)?,
        Command::FitTds => commands::fit_tds(&cfg)?,
        Command::PretrainGas => commands::pretrain(&cfg)?,
        Command::Train(_) => commands::train(&cfg)?,
        Command::Evaluate { .. } => commands::evaluate(&cfg)?,
        Command::Ablate(_) => commands::ablate(&cfg)?,
        Command::Sweep { .. } => commands::sweep(&cfg)?,
        Command::Embed { .. } => commands::embed(&cfg)?,
        Command::Gradcheck => return commands::gradcheck(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
