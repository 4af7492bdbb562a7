//! JSON checkpoints: a manifest plus named tensors as nested arrays.

use std::collections::BTreeMap;
use std::path::Path;

use dps_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{DpsError, Result};
use crate::gas::GasModel;
use crate::graph::TemporalGraph;
use crate::model::{DpsModel, ModelHyper};
use crate::tds::DecayRates;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub modules: BTreeMap<String, String>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub hyperparameters: Value,
    pub dataset_fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    manifest: Manifest,
    tensors: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GasHyper {
    num_nodes: usize,
    edge_dim: usize,
    d_node: usize,
    d_time: usize,
    d_proj: usize,
    temperature: f64,
    trained: bool,
}

/// Any combination of trained artifacts.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub dps: Option<DpsModel>,
    pub gas: Option<GasModel>,
    pub rates: Option<DecayRates>,
}

fn module_versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    ["graph_store", "tds", "autodiff", "gas", "fusion_model", "trainer"]
        .into_iter()
        .map(|m| (m.to_string(), v.clone()))
        .collect()
}

fn nested(t: &Tensor) -> Result<Value> {
    if !t.is_finite() {
        return Err(DpsError::Checkpoint("cannot serialize non-finite values".into()));
    }
    fn build(shape: &[usize], data: &[f64]) -> Value {
        match shape {
            [] => json!(data[0]),
            [_] => Value::Array(data.iter().map(|x| json!(x)).collect()),
            [n, rest @ ..] => {
                let step: usize = rest.iter().product();
                Value::Array((0..*n).map(|i| build(rest, &data[i * step..(i + 1) * step])).collect())
            }
        }
    }
    Ok(build(t.shape(), t.data()))
}

fn flatten(name: &str, v: &Value, shape: &[usize]) -> Result<Tensor> {
    fn walk(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> bool {
        match shape {
            [] => v.as_f64().map(|x| out.push(x)).is_some(),
            [n, rest @ ..] => match v.as_array() {
                Some(a) if a.len() == *n => a.iter().all(|x| walk(x, rest, out)),
                _ => false,
            },
        }
    }
    let mut data = Vec::with_capacity(shape.iter().product());
    if !walk(v, shape, &mut data) {
        return Err(DpsError::Checkpoint(format!("tensor {name} does not match shape {shape:?}")));
    }
    Ok(Tensor::new(shape, data)?)
}

fn put_store(store: &ParamStore, shapes: &mut BTreeMap<String, Vec<usize>>, tensors: &mut BTreeMap<String, Value>) -> Result<()> {
    for (_, name, t) in store.iter() {
        shapes.insert(name.to_string(), t.shape().to_vec());
        tensors.insert(name.to_string(), nested(t)?);
    }
    Ok(())
}

fn fill_store(store: &mut ParamStore, file: &CheckpointFile) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let expected = store.get(id).shape().to_vec();
        let shape = file
            .manifest
            .shapes
            .get(&name)
            .ok_or_else(|| DpsError::Checkpoint(format!("missing tensor {name}")))?;
        if *shape != expected {
            return Err(DpsError::Checkpoint(format!("tensor {name} has shape {shape:?}, model expects {expected:?}")));
        }
        let v = file.tensors.get(&name).ok_or_else(|| DpsError::Checkpoint(format!("missing tensor {name}")))?;
        *store.get_mut(id) = flatten(&name, v, shape)?;
    }
    Ok(())
}

impl Artifacts {
    pub fn to_json(&self, g: &TemporalGraph) -> Result<String> {
        let mut shapes = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let mut hyper = serde_json::Map::new();
        if let Some(m) = &self.dps {
            put_store(&m.store, &mut shapes, &mut tensors)?;
            hyper.insert("dps".into(), serde_json::to_value(&m.hyper)?);
        }
        if let Some(m) = &self.gas {
            put_store(&m.store, &mut shapes, &mut tensors)?;
            let h = GasHyper {
                num_nodes: m.num_nodes,
                edge_dim: m.edge_dim,
                d_node: m.d_node,
                d_time: m.d_time,
                d_proj: m.d_proj,
                temperature: m.temperature,
                trained: m.trained,
            };
            hyper.insert("gas".into(), serde_json::to_value(h)?);
        }
        if let Some(r) = &self.rates {
            let n = r.lambda.len();
            let fitted = r.fitted.iter().map(|&f| f64::from(u8::from(f))).collect();
            for (name, t) in [
                ("tds.lambda", Tensor::new(&[n], r.lambda.clone())?),
                ("tds.fitted", Tensor::new(&[n], fitted)?),
                ("tds.fallback_lambda", Tensor::scalar(r.fallback_lambda)),
            ] {
                shapes.insert(name.into(), t.shape().to_vec());
                tensors.insert(name.into(), nested(&t)?);
            }
            hyper.insert("tds".into(), json!({ "num_nodes": n }));
        }
        let file = CheckpointFile {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                modules: module_versions(),
                shapes,
                hyperparameters: Value::Object(hyper),
                dataset_fingerprint: g.fingerprint(),
            },
            tensors,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a checkpoint. With `g`, the dataset fingerprint must match.
    pub fn from_json(text: &str, g: Option<&TemporalGraph>) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        let m = &file.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(DpsError::Checkpoint(format!("unsupported format version {}", m.format_version)));
        }
        if let Some(g) = g {
            if g.fingerprint() != m.dataset_fingerprint {
                return Err(DpsError::Checkpoint("checkpoint was produced from a different dataset".into()));
            }
        }
        let hyper = m.hyperparameters.as_object().cloned().unwrap_or_default();
        let mut out = Artifacts::default();
        if let Some(h) = hyper.get("dps") {
            let h: ModelHyper = serde_json::from_value(h.clone())?;
            let mut model = DpsModel::new(h, 0)?;
            fill_store(&mut model.store, &file)?;
            out.dps = Some(model);
        }
        if let Some(h) = hyper.get("gas") {
            let h: GasHyper = serde_json::from_value(h.clone())?;
            let mut model = GasModel::new(h.num_nodes, h.edge_dim, h.d_node, h.d_time, h.d_proj, 0)?;
            fill_store(&mut model.store, &file)?;
            model.temperature = h.temperature;
            model.trained = h.trained;
            out.gas = Some(model);
        }
        if let Some(h) = hyper.get("tds") {
            let n = h.get("num_nodes").and_then(Value::as_u64).ok_or_else(|| DpsError::Checkpoint("tds node count".into()))? as usize;
            let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
                let v = file.tensors.get(name).ok_or_else(|| DpsError::Checkpoint(format!("missing tensor {name}")))?;
                flatten(name, v, shape)
            };
            out.rates = Some(DecayRates {
                lambda: get("tds.lambda", &[n])?.into_data(),
                fitted: get("tds.fitted", &[n])?.data().iter().map(|&x| x != 0.0).collect(),
                fallback_lambda: get("tds.fallback_lambda", &[])?.item(),
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>, g: &TemporalGraph) -> Result<()> {
        std::fs::write(path, self.to_json(g)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, g: Option<&TemporalGraph>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, g)
    }

    /// Fills empty slots from `other`.
    pub fn merge(mut self, other: Artifacts) -> Self {
        self.dps = self.dps.or(other.dps);
        self.gas = self.gas.or(other.gas);
        self.rates = self.rates.or(other.rates);
        self
    }
}

/// Reads only the manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(file.manifest)
}
