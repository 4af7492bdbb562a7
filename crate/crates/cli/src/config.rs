//! Run configuration: a JSON file merged with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dps_core::graph::{LoadOptions, SynthParams};
use dps_core::par::Execution;
use dps_core::trainer::{ClassifierConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Neighbors,
    BatchSize,
    Dropout,
    Heads,
    Layers,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SweepAxis::Neighbors => "neighbors",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Dropout => "dropout",
            SweepAxis::Heads => "heads",
            SweepAxis::Layers => "layers",
        };
        f.write_str(s)
    }
}

impl SweepAxis {
    /// The searched grid for this axis.
    pub fn default_values(self) -> Vec<f64> {
        use dps_core::trainer::{BATCH_SIZES, DROPOUTS, HEADS, LAYERS, NEIGHBORS};
        let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect();
        match self {
            SweepAxis::Neighbors => as_f64(&NEIGHBORS),
            SweepAxis::BatchSize => as_f64(&BATCH_SIZES),
            SweepAxis::Dropout => DROPOUTS.to_vec(),
            SweepAxis::Heads => as_f64(&HEADS),
            SweepAxis::Layers => as_f64(&LAYERS),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<()> {
        let count = || -> Result<usize> {
            if value < 1.0 || value.fract() != 0.0 {
                bail!("{self} needs a positive whole number, got {value}");
            }
            Ok(value as usize)
        };
        match self {
            SweepAxis::Neighbors => cfg.neighbors = count()?,
            SweepAxis::BatchSize => cfg.batch_size = count()?,
            SweepAxis::Heads => cfg.heads = count()?,
            SweepAxis::Layers => cfg.layers = count()?,
            SweepAxis::Dropout => cfg.dropout = value,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    /// Empty means the axis' default grid.
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalPart {
    Validation,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub load: LoadOptions,
    pub split: [f64; 3],
    /// When set, replaces the seeds of `train`, `synth` and `classifier`.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Forces sequential execution.
    pub deterministic: bool,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub classifier: ClassifierConfig,
    /// Model checkpoint read by `evaluate` and `embed`.
    pub checkpoint: Option<PathBuf>,
    pub tds_checkpoint: Option<PathBuf>,
    pub gas_checkpoint: Option<PathBuf>,
    /// `node_id timestamp label` lines for node classification in `evaluate`.
    pub labels: Option<PathBuf>,
    /// `node_id timestamp` lines for `embed`.
    pub queries: Option<PathBuf>,
    pub part: EvalPart,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            load: LoadOptions::default(),
            split: [0.7, 0.15, 0.15],
            seed: None,
            out: PathBuf::from("out"),
            deterministic: false,
            train: TrainConfig::default(),
            synth: SynthParams::default(),
            classifier: ClassifierConfig::default(),
            checkpoint: None,
            tds_checkpoint: None,
            gas_checkpoint: None,
            labels: None,
            queries: None,
            part: EvalPart::Test,
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the shared seed and execution mode into the sub-configs.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
            self.classifier.seed = seed;
        }
        if self.deterministic {
            self.train.execution = Execution::Sequential;
        }
        self.train.validate()?;
        Ok(self)
    }

    pub fn dataset(&self) -> Result<&Path> {
        match &self.dataset {
            Some(p) => Ok(p),
            None => bail!("no dataset given (use --data or set \"dataset\" in the config)"),
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }

    pub fn execution(&self) -> Execution {
        self.train.execution
    }

    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
