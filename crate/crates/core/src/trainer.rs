//! Training and evaluation for temporal link prediction, the sampler
//! ablations, and the temporal node classifier.

use std::collections::BTreeSet;

use dps_autodiff::{glorot_uniform, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpsError, Result};
use crate::gas::{pretrain_gas, GasConfig, GasModel, GasReport, GasScorer};
use crate::graph::{ChronoSplit, LabelEvent, TemporalGraph};
use crate::metrics::{accuracy, link_loss, link_loss_value, roc_auc, EarlyStopping};
use crate::model::{Branches, DpsModel, ModelHyper, SamplerMode};
use crate::par::{item_seed, map_indexed, Execution};
use crate::sampling::{link_examples, score_in_chunks, LinkExample, NeighborSampler};
use crate::tds::{fit_all, DecayRates, TdsConfig, DEFAULT_EVENT_BUDGET};

pub const BATCH_SIZES: [usize; 4] = [100, 150, 200, 250];
pub const DROPOUTS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
pub const LAYERS: [usize; 2] = [1, 2];
pub const HEADS: [usize; 3] = [1, 2, 4];
pub const NEIGHBORS: [usize; 4] = [10, 20, 30, 40];

const TRAIN_STREAM: u64 = 0x5452_4149;
const VAL_STREAM: u64 = 0x5641_4c44;
const TEST_STREAM: u64 = 0x5445_5354;
const EVAL_STREAM: u64 = 0x4556_414c;
const PROBE_STREAM: u64 = 0x5052_4f42;
const PROBE_SIZE: usize = 2000;
const EVAL_CHUNK: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub layers: usize,
    pub heads: usize,
    pub neighbors: usize,
    pub d_model: usize,
    pub d_time: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub sampler_mode: SamplerMode,
    /// Permit settings outside the searched grids.
    pub allow_off_grid: bool,
    pub tds_budget: usize,
    pub gas_max_epochs: usize,
    pub gas_max_candidates: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            dropout: 0.1,
            layers: 2,
            heads: 2,
            neighbors: 20,
            d_model: 64,
            d_time: 64,
            lr: 1e-3,
            weight_decay: 1e-5,
            patience: 3,
            max_epochs: 50,
            seed: 0,
            sampler_mode: SamplerMode::Dps,
            allow_off_grid: false,
            tds_budget: DEFAULT_EVENT_BUDGET,
            gas_max_epochs: 50,
            gas_max_candidates: 200,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpsError::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.tds_budget == 0 {
            return bad("batch_size, max_epochs, patience and tds_budget must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !self.allow_off_grid {
            if !BATCH_SIZES.contains(&self.batch_size) {
                return bad(format!("batch_size {} not in {BATCH_SIZES:?}", self.batch_size));
            }
            if !DROPOUTS.contains(&self.dropout) {
                return bad(format!("dropout {} not in {DROPOUTS:?}", self.dropout));
            }
            if !NEIGHBORS.contains(&self.neighbors) {
                return bad(format!("neighbors {} not in {NEIGHBORS:?}", self.neighbors));
            }
        }
        if !LAYERS.contains(&self.layers) {
            return bad(format!("layers {} not in {LAYERS:?}", self.layers));
        }
        if !HEADS.contains(&self.heads) {
            return bad(format!("heads {} not in {HEADS:?}", self.heads));
        }
        Ok(())
    }

    pub fn hyper(&self, g: &TemporalGraph) -> ModelHyper {
        ModelHyper {
            num_nodes: g.num_nodes(),
            edge_dim: g.feature_dim(),
            d_model: self.d_model,
            d_time: self.d_time,
            heads: self.heads,
            layers: self.layers,
            neighbors: self.neighbors,
            dropout: self.dropout,
            mode: self.sampler_mode,
        }
    }

    pub fn gas_config(&self) -> GasConfig {
        GasConfig {
            d_node: self.d_model,
            d_time: self.d_time,
            d_proj: self.d_model,
            neighbors: self.neighbors,
            batch_size: self.batch_size,
            max_epochs: self.gas_max_epochs,
            patience: self.patience,
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_candidates: self.gas_max_candidates,
            seed: self.seed,
            execution: self.execution,
            ..GasConfig::default()
        }
    }

    pub fn tds_config(&self) -> TdsConfig {
        TdsConfig { budget: self.tds_budget, seed: self.seed, execution: self.execution }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Probe-set training loss after each epoch.
    pub loss_history: Vec<f64>,
    pub init_loss: f64,
    pub val_auc_history: Vec<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
}

impl EvalReport {
    fn from_scores(pos: &[f64], neg: &[f64]) -> Result<Self> {
        if pos.is_empty() {
            return Err(DpsError::Contract("evaluation needs at least one positive".into()));
        }
        Ok(EvalReport {
            accuracy: accuracy(pos, neg, 0.5),
            auc: roc_auc(pos, neg)?,
            n_pos: pos.len(),
            n_neg: neg.len(),
            ..EvalReport::default()
        })
    }
}

/// Which samplers ran and which parameters entered a computation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerUsage {
    pub tds_calls: usize,
    pub gas_calls: usize,
    pub uniform_calls: usize,
    pub touched_params: BTreeSet<String>,
}

impl SamplerUsage {
    pub fn touched_prefix(&self, prefix: &str) -> bool {
        self.touched_params.iter().any(|n| n.starts_with(prefix))
    }
}

/// Samplers for one model, built from the prepared artifacts the mode needs.
pub struct SamplerSet<'a> {
    first: NeighborSampler<'a>,
    second: Option<NeighborSampler<'a>>,
    mode: SamplerMode,
}

impl<'a> SamplerSet<'a> {
    pub fn new(mode: SamplerMode, rates: Option<&'a DecayRates>, gas: Option<&'a GasScorer>) -> Result<Self> {
        let need_rates = || rates.ok_or_else(|| DpsError::Contract(format!("mode {mode} needs fitted decay rates")));
        let need_gas = || gas.ok_or_else(|| DpsError::Contract(format!("mode {mode} needs a pretrained GAS model")));
        let (first, second) = match mode {
            SamplerMode::TdsOnly => (NeighborSampler::tds(need_rates()?), None),
            SamplerMode::GasOnly => (NeighborSampler::gas(need_gas()?), None),
            SamplerMode::Dps | SamplerMode::NoFusion => {
                (NeighborSampler::tds(need_rates()?), Some(NeighborSampler::gas(need_gas()?)))
            }
            SamplerMode::Uniform => (NeighborSampler::uniform(), Some(NeighborSampler::uniform())),
        };
        Ok(SamplerSet { first, second, mode })
    }

    pub fn branches(&self) -> Branches<'_> {
        match self.mode {
            SamplerMode::GasOnly => Branches { tds: None, gas: Some(&self.first) },
            _ => Branches { tds: Some(&self.first), gas: self.second.as_ref() },
        }
    }

    pub fn usage(&self) -> SamplerUsage {
        let mut u = SamplerUsage::default();
        for s in std::iter::once(&self.first).chain(self.second.as_ref()) {
            match s.name() {
                "tds" => u.tds_calls += s.calls(),
                "gas" => u.gas_calls += s.calls(),
                _ => u.uniform_calls += s.calls(),
            }
        }
        u
    }
}

/// Link probabilities for the positives and negatives of `examples`.
pub fn score_examples(
    model: &DpsModel,
    g: &TemporalGraph,
    samplers: &SamplerSet,
    examples: &[LinkExample],
    exec: Execution,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    score_in_chunks(exec, examples, EVAL_CHUNK, item_seed(seed, EVAL_STREAM), |chunk, rng| {
        let mut tape = Tape::inference();
        let links = paired_links(chunk);
        let p = model.score_links(&mut tape, g, samplers.branches(), &links, false, rng)?;
        let v = tape.value(p).data();
        Ok((v[..chunk.len()].to_vec(), v[chunk.len()..].to_vec()))
    })
}

fn paired_links(examples: &[LinkExample]) -> Vec<(usize, usize, f64)> {
    examples
        .iter()
        .map(|e| (e.src, e.dst, e.time))
        .chain(examples.iter().map(|e| (e.src, e.neg, e.time)))
        .collect()
}

/// Validation negatives, fixed per seed.
pub fn validation_examples(g: &TemporalGraph, split: &ChronoSplit, seed: u64) -> Vec<LinkExample> {
    link_examples(g, &split.val, &mut ChaCha8Rng::seed_from_u64(item_seed(seed, VAL_STREAM)))
}

/// Test negatives, fixed per seed.
pub fn test_examples(g: &TemporalGraph, split: &ChronoSplit, seed: u64) -> Vec<LinkExample> {
    link_examples(g, &split.test, &mut ChaCha8Rng::seed_from_u64(item_seed(seed, TEST_STREAM)))
}

/// Accuracy at 0.5 and AUC over `examples`, one negative per positive.
pub fn evaluate_links(
    model: &DpsModel,
    g: &TemporalGraph,
    samplers: &SamplerSet,
    examples: &[LinkExample],
    exec: Execution,
    seed: u64,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(DpsError::Contract("evaluation needs at least one positive".into()));
    }
    let (pos, neg) = score_examples(model, g, samplers, examples, exec, seed)?;
    EvalReport::from_scores(&pos, &neg)
}

/// Output of [`train_dps`].
pub struct TrainOutcome {
    pub model: DpsModel,
    /// Validation metrics of the returned (best) model plus training history.
    pub report: EvalReport,
    pub usage: SamplerUsage,
}

/// Trains a DPS model (or an ablation variant chosen by `cfg.sampler_mode`).
/// Returns the parameters from the best validation epoch.
pub fn train_dps(
    g: &TemporalGraph,
    split: &ChronoSplit,
    rates: Option<&DecayRates>,
    gas: Option<&GasModel>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(DpsError::Contract("training needs at least one training edge".into()));
    }
    let mode = cfg.sampler_mode;
    let scorer = match gas {
        Some(m) if mode.uses_gas() => Some(m.scorer(g)?),
        _ => None,
    };
    let samplers = SamplerSet::new(mode, rates.filter(|_| mode.uses_tds()), scorer.as_ref())?;
    let mut model = DpsModel::new(cfg.hyper(g), cfg.seed)?;

    let val = validation_examples(g, split, cfg.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, PROBE_STREAM));
    let mut probe_ids = split.train.clone();
    probe_ids.shuffle(&mut probe_rng);
    probe_ids.truncate(PROBE_SIZE);
    let probe = link_examples(g, &probe_ids, &mut probe_rng);
    let probe_loss = |m: &DpsModel| -> Result<f64> {
        let (p, n) = score_examples(m, g, &samplers, &probe, cfg.execution, cfg.seed)?;
        Ok(p.iter().zip(&n).map(|(a, b)| link_loss_value(*a, *b)).sum::<f64>() / p.len() as f64)
    };

    let mut report = EvalReport { init_loss: probe_loss(&model)?, ..EvalReport::default() };
    let mut touched: BTreeSet<ParamId> = BTreeSet::new();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut stopper: EarlyStopping<ParamStore> = EarlyStopping::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, TRAIN_STREAM));
    let mut order = split.train.clone();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks(cfg.batch_size) {
            let batch = link_examples(g, ids, &mut rng);
            let links = paired_links(&batch);
            let mut tape = Tape::new();
            let p = model.score_links(&mut tape, g, samplers.branches(), &links, true, &mut rng)?;
            let n = batch.len();
            let pp = tape.gather(p, &(0..n).collect::<Vec<_>>())?;
            let pn = tape.gather(p, &(n..2 * n).collect::<Vec<_>>())?;
            let loss = link_loss(&mut tape, pp, pn)?;
            touched.extend(tape.touched_params());
            let grads = tape.backward(loss)?;
            adam.step(&mut model.store, &grads);
        }
        if !model.store.all_finite() {
            return Err(DpsError::Contract(format!("parameters became non-finite in epoch {epoch}")));
        }
        report.loss_history.push(probe_loss(&model)?);
        let auc = if val.is_empty() {
            -report.loss_history[epoch]
        } else {
            let (p, n) = score_examples(&model, g, &samplers, &val, cfg.execution, cfg.seed)?;
            roc_auc(&p, &n)?
        };
        report.val_auc_history.push(auc);
        log::info!("{mode} epoch {epoch}: probe loss {:.4} val auc {auc:.4}", report.loss_history[epoch]);
        if stopper.observe(auc, || model.store.clone()) {
            break;
        }
    }
    report.epochs = stopper.epochs_seen();
    report.best_epoch = stopper.best_epoch().unwrap_or(0);
    if let Some(best) = stopper.into_best() {
        model.store = best;
    }
    if !val.is_empty() {
        let v = evaluate_links(&model, g, &samplers, &val, cfg.execution, cfg.seed)?;
        report.accuracy = v.accuracy;
        report.auc = v.auc;
        report.n_pos = v.n_pos;
        report.n_neg = v.n_neg;
    }
    let mut usage = samplers.usage();
    usage.touched_params = touched.into_iter().map(|id| model.store.name(id).to_string()).collect();
    Ok(TrainOutcome { model, report, usage })
}

/// One trained variant and its test metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: SamplerMode,
    pub test: EvalReport,
    pub validation: EvalReport,
    pub usage: SamplerUsage,
}

pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub models: Vec<DpsModel>,
    pub rates: Option<DecayRates>,
    pub gas: Option<(GasModel, GasReport)>,
}

/// Trains and tests each mode in `modes`, fitting TDS and pretraining GAS
/// only if some mode needs them. Modes run in parallel under `cfg.execution`.
pub fn run_modes(g: &TemporalGraph, split: &ChronoSplit, cfg: &TrainConfig, modes: &[SamplerMode]) -> Result<AblationResult> {
    cfg.validate()?;
    let rates = if modes.iter().any(|m| m.uses_tds()) { Some(fit_all(g, split, &cfg.tds_config())?) } else { None };
    let gas = if modes.iter().any(|m| m.uses_gas()) { Some(pretrain_gas(g, split, &cfg.gas_config())?) } else { None };
    let test = test_examples(g, split, cfg.seed);
    let runs = map_indexed(cfg.execution, modes, |_, &mode| -> Result<(AblationRow, DpsModel)> {
        let mcfg = TrainConfig { sampler_mode: mode, ..cfg.clone() };
        let r = if mode.uses_tds() { rates.as_ref() } else { None };
        let gm = if mode.uses_gas() { gas.as_ref().map(|x| &x.0) } else { None };
        let out = train_dps(g, split, r, gm, &mcfg)?;
        let scorer = gm.map(|m| m.scorer(g)).transpose()?;
        let samplers = SamplerSet::new(mode, r, scorer.as_ref())?;
        let t = evaluate_links(&out.model, g, &samplers, &test, cfg.execution, cfg.seed)?;
        let test_report = EvalReport { epochs: out.report.epochs, best_epoch: out.report.best_epoch, ..t };
        Ok((AblationRow { mode, test: test_report, validation: out.report, usage: out.usage }, out.model))
    });
    let mut rows = Vec::with_capacity(modes.len());
    let mut models = Vec::with_capacity(modes.len());
    for r in runs {
        let (row, model) = r?;
        rows.push(row);
        models.push(model);
    }
    Ok(AblationResult { rows, models, rates, gas })
}

/// The five sampler variants.
pub fn ablation_run(g: &TemporalGraph, split: &ChronoSplit, cfg: &TrainConfig) -> Result<AblationResult> {
    run_modes(g, split, cfg, &SamplerMode::ALL)
}

/// Three-layer perceptron with widths 80, 10, 1.
#[derive(Clone, Debug)]
pub struct NodeClassifierHead {
    pub store: ParamStore,
    pub weights: [ParamId; 3],
    pub biases: [ParamId; 3],
}

pub const CLASSIFIER_WIDTHS: [usize; 3] = [80, 10, 1];

impl NodeClassifierHead {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut fan_in = input_dim;
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for (i, &w) in CLASSIFIER_WIDTHS.iter().enumerate() {
            weights.push(store.add(format!("cls.w{i}"), glorot_uniform(&[fan_in, w], &mut rng)));
            biases.push(store.add(format!("cls.b{i}"), Tensor::zeros(&[w])));
            fan_in = w;
        }
        NodeClassifierHead { store, weights: [weights[0], weights[1], weights[2]], biases: [biases[0], biases[1], biases[2]] }
    }

    fn forward(&self, tape: &mut Tape, x: dps_autodiff::Var) -> Result<dps_autodiff::Var> {
        let mut h = x;
        for i in 0..3 {
            let w = tape.param(&self.store, self.weights[i]);
            let b = tape.param(&self.store, self.biases[i]);
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            h = if i < 2 { tape.relu(h)? } else { tape.sigmoid(h)? };
        }
        Ok(h)
    }

    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_rows(xs));
        let p = self.forward(&mut tape, x)?;
        Ok(tape.value(p).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { batch_size: 200, lr: 1e-3, weight_decay: 1e-5, patience: 10, max_epochs: 200, seed: 0 }
    }
}

/// Batches over a shuffled order; in each batch the minority class is
/// resampled with replacement until both classes are equally represented.
pub fn balanced_batches<R: Rng + ?Sized>(labels: &[u8], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut b = chunk.to_vec();
            let np = b.iter().filter(|&&i| labels[i] == 1).count();
            let nn = b.len() - np;
            let (short, pool) = if np < nn { (nn - np, &pos) } else { (np - nn, &neg) };
            for _ in 0..short {
                b.push(pool[rng.gen_range(0..pool.len())]);
            }
            b
        })
        .collect()
}

fn both_classes(labels: &[u8]) -> bool {
    labels.contains(&1) && labels.iter().any(|&l| l != 1)
}

fn scored_report(p: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let pos: Vec<f64> = p.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = p.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(s, _)| *s).collect();
    EvalReport::from_scores(&pos, &neg)
}

/// Labelled feature vectors.
pub struct LabelledSet<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [u8],
}

/// Trains the classifier head on fixed inputs with balanced batches and
/// early stopping on validation AUC. The report carries test metrics.
pub fn train_classifier(
    train: LabelledSet,
    val: LabelledSet,
    test: LabelledSet,
    cfg: &ClassifierConfig,
) -> Result<(NodeClassifierHead, EvalReport)> {
    if !both_classes(train.y) {
        return Err(DpsError::Contract("node classification needs both classes in the training labels".into()));
    }
    let dim = train.x[0].len();
    let mut head = NodeClassifierHead::new(dim, cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, TRAIN_STREAM));
    let mut stopper: EarlyStopping<ParamStore> = EarlyStopping::new(cfg.patience.max(1));
    let mut report = EvalReport::default();
    let monitor = |h: &NodeClassifierHead| -> Result<f64> {
        if both_classes(val.y) {
            Ok(scored_report(&h.predict(val.x)?, val.y)?.auc)
        } else {
            Ok(scored_report(&h.predict(train.x)?, train.y)?.auc)
        }
    };
    for _ in 0..cfg.max_epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for b in balanced_batches(train.y, cfg.batch_size, &mut rng) {
            let rows: Vec<Vec<f64>> = b.iter().map(|&i| train.x[i].clone()).collect();
            let ys: Vec<f64> = b.iter().map(|&i| f64::from(train.y[i])).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&rows));
            let p = head.forward(&mut tape, x)?;
            let p = tape.clamp(p, 1e-7, 1.0 - 1e-7)?;
            let y = tape.constant(Tensor::new(&[ys.len(), 1], ys.clone())?);
            let ny = tape.constant(Tensor::new(&[ys.len(), 1], ys.iter().map(|v| 1.0 - v).collect())?);
            let lp = tape.log(p)?;
            let q = tape.affine(p, -1.0, 1.0)?;
            let lq = tape.log(q)?;
            let a = tape.mul(y, lp)?;
            let c = tape.mul(ny, lq)?;
            let s = tape.add(a, c)?;
            let m = tape.mean_all(s)?;
            let loss = tape.scale(m, -1.0)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            adam.step(&mut head.store, &grads);
        }
        report.loss_history.push(total / batches.max(1) as f64);
        let score = monitor(&head)?;
        report.val_auc_history.push(score);
        if stopper.observe(score, || head.store.clone()) {
            break;
        }
    }
    report.epochs = stopper.epochs_seen();
    report.best_epoch = stopper.best_epoch().unwrap_or(0);
    if let Some(best) = stopper.into_best() {
        head.store = best;
    }
    let eval = if both_classes(test.y) { test } else { val };
    let r = scored_report(&head.predict(eval.x)?, eval.y)?;
    Ok((head, EvalReport { loss_history: report.loss_history, val_auc_history: report.val_auc_history, epochs: report.epochs, best_epoch: report.best_epoch, ..r }))
}

/// Node classification on frozen temporal embeddings taken at each label
/// event's time. Label events are assigned to train/val/test by the time
/// boundaries of the edge split.
pub fn train_node_classifier(
    model: &DpsModel,
    g: &TemporalGraph,
    samplers: &SamplerSet,
    labels: &[LabelEvent],
    split: &ChronoSplit,
    cfg: &ClassifierConfig,
) -> Result<(NodeClassifierHead, EvalReport)> {
    let train_end = split.train.last().map(|&i| g.edge(i).timestamp).unwrap_or(f64::NEG_INFINITY);
    let val_end = split.val.iter().map(|&i| g.edge(i).timestamp).fold(train_end, f64::max);
    let queries: Vec<(usize, f64)> = labels.iter().map(|l| (l.node, l.timestamp)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, EVAL_STREAM));
    let mut emb = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_CHUNK) {
        emb.extend(model.embed_values(g, samplers.branches(), chunk, &mut rng)?);
    }
    let mut parts: [(Vec<Vec<f64>>, Vec<u8>); 3] = Default::default();
    for (l, e) in labels.iter().zip(emb) {
        let k = if l.timestamp <= train_end { 0 } else if l.timestamp <= val_end { 1 } else { 2 };
        parts[k].0.push(e);
        parts[k].1.push(l.label);
    }
    let [tr, va, te] = &parts;
    train_classifier(
        LabelledSet { x: &tr.0, y: &tr.1 },
        LabelledSet { x: &va.0, y: &va.1 },
        LabelledSet { x: &te.0, y: &te.1 },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_on_grid() {
        TrainConfig::default().validate().unwrap();
        let off = TrainConfig { neighbors: 7, ..TrainConfig::default() };
        assert!(off.validate().is_err());
        TrainConfig { allow_off_grid: true, ..off }.validate().unwrap();
        assert!(TrainConfig { heads: 3, allow_off_grid: true, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batches_are_balanced() {
        let labels: Vec<u8> = (0..103).map(|i| u8::from(i % 9 == 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in balanced_batches(&labels, 20, &mut rng) {
            let p = b.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(2 * p, b.len());
        }
    }

    #[test]
    fn classifier_widths() {
        let h = NodeClassifierHead::new(7, 0);
        let shapes: Vec<Vec<usize>> = h.weights.iter().map(|&w| h.store.get(w).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![7, 80], vec![80, 10], vec![10, 1]]);
    }

    #[test]
    fn single_class_labels_rejected() {
        let x = vec![vec![0.0; 3]; 4];
        let y = vec![0u8; 4];
        let set = || LabelledSet { x: &x, y: &y };
        assert!(train_classifier(set(), set(), set(), &ClassifierConfig::default()).is_err());
    }
}
