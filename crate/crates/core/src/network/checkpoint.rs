//! Checkpoint directories: `manifest.json` plus one raw little-endian payload
//! file per parameter under `params/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, DtsError, Result};
use crate::network::config::ModelConfig;
use crate::network::model::DtsModel;
use crate::nn::ParamStore;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "dts-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub parameters: Vec<ParamEntry>,
    /// Free-form provenance, e.g. which pretext losses produced the weights.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("float32"),
        DType::F64 => Ok("float64"),
        other => Err(contract_err!("unsupported checkpoint dtype {other:?}")),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "float32" => Ok(DType::F32),
        "float64" => Ok(DType::F64),
        other => Err(DtsError::Format(format!(
            "unknown checkpoint dtype {other}"
        ))),
    }
}

fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(contract_err!("unsupported checkpoint dtype {other:?}")),
    })
}

fn from_bytes(bytes: &[u8], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let size = dtype.size_in_bytes();
    if bytes.len() != n * size {
        return Err(DtsError::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            n * size
        )));
    }
    Ok(match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
    })
}

/// Writes every parameter of `store` (optionally only those under `prefix`).
pub fn save_params(
    dir: &Path,
    config: &ModelConfig,
    store: &ParamStore,
    prefix: Option<&str>,
    metadata: serde_json::Value,
) -> Result<Manifest> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| DtsError::io(&params_dir, e))?;
    let mut parameters = Vec::new();
    for (name, var) in store.iter() {
        if prefix.is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        let file = format!("params/{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, to_bytes(var.as_tensor())?).map_err(|e| DtsError::io(&path, e))?;
        parameters.push(ParamEntry {
            name: name.to_string(),
            shape: var.dims().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        dtype: dtype_name(store.dtype())?.to_string(),
        config: config.clone(),
        parameters,
        metadata,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| DtsError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| DtsError::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(DtsError::Format(format!(
            "{} is not a version-1 {FORMAT} manifest",
            path.display()
        )));
    }
    Ok(m)
}

/// Reads all payloads of a checkpoint.
pub fn load_params(dir: &Path, device: &Device) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let manifest = read_manifest(dir)?;
    let dtype = parse_dtype(&manifest.dtype)?;
    let mut out = BTreeMap::new();
    for p in &manifest.parameters {
        let path = dir.join(&p.file);
        let bytes = fs::read(&path).map_err(|e| DtsError::io(&path, e))?;
        out.insert(p.name.clone(), from_bytes(&bytes, &p.shape, dtype, device)?);
    }
    Ok((manifest, out))
}

/// Copies matching tensors into `store`. Returns the number assigned.
pub fn assign_params(
    store: &ParamStore,
    params: &BTreeMap<String, Tensor>,
    prefix: Option<&str>,
) -> Result<usize> {
    let mut n = 0;
    for (name, t) in params {
        if prefix.is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        store.assign(name, t)?;
        n += 1;
    }
    Ok(n)
}

impl DtsModel {
    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<Manifest> {
        save_params(dir, self.config(), self.store(), None, metadata)
    }

    pub fn load_cpu(dir: &Path) -> Result<Self> {
        Self::load(dir, &Device::Cpu)
    }

    /// Rebuilds a model from a full checkpoint.
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let (manifest, params) = load_params(dir, device)?;
        let dtype = parse_dtype(&manifest.dtype)?;
        let model = DtsModel::new(manifest.config.clone(), 0, dtype, device)?;
        let expected = model.store().len();
        if params.len() != expected {
            return Err(DtsError::Format(format!(
                "checkpoint has {} parameters, model needs {expected}",
                params.len()
            )));
        }
        assign_params(model.store(), &params, None)?;
        Ok(model)
    }
}
