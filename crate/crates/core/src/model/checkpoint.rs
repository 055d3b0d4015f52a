//! Checkpoint format: magic `PFL1`, a little-endian u32 header length, a
//! JSON header (config, adapter specs, objective tag, step, seed, array
//! manifest), then the named arrays as little-endian f32 in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, lora::LoraAdapter, ModelConfig, TransformerModel};
use crate::tensor::TensorData;

const MAGIC: &[u8; 4] = b"PFL1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub target: String,
    pub r: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub adapters: Vec<AdapterSpec>,
    pub objective: String,
    pub step: u64,
    pub seed: u64,
    arrays: Vec<ArraySpec>,
}

fn named_arrays(model: &TransformerModel) -> Vec<(String, &TensorData)> {
    let mut out: Vec<(String, &TensorData)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    for a in &model.adapters {
        out.push((super::lora::a_name(&a.target), &a.a));
        out.push((super::lora::b_name(&a.target), &a.b));
    }
    out
}

pub fn save_checkpoint(
    model: &TransformerModel,
    objective: &str,
    step: u64,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let arrays = named_arrays(model);
    let meta = CheckpointMeta {
        config: model.config.clone(),
        adapters: model
            .adapters
            .iter()
            .map(|a| AdapterSpec {
                target: a.target.clone(),
                r: a.r,
                alpha: a.alpha,
            })
            .collect(),
        objective: objective.to_string(),
        step,
        seed,
        arrays: arrays
            .iter()
            .map(|(name, data)| ArraySpec {
                name: name.clone(),
                shape: data.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, data) in arrays {
        for &v in data.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerModel, CheckpointMeta)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| format_error(path, "truncated before magic"))?;
    if &magic != MAGIC {
        return Err(format_error(path, "bad magic bytes"));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)
        .map_err(|_| format_error(path, "truncated header length"))?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut header)
        .map_err(|_| format_error(path, "truncated header"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| format_error(path, &format!("header is not valid JSON: {e}")))?;

    let mut model = init_model(&meta.config)?;
    // Recreate adapters with placeholder arrays; real values stream in below.
    for spec in &meta.adapters {
        let base = model
            .param(&spec.target)
            .ok_or_else(|| format_error(path, &format!("adapter target `{}` missing", spec.target)))?;
        let shape = base.value.shape().to_vec();
        model.adapters.push(LoraAdapter {
            target: spec.target.clone(),
            a: TensorData::zeros(vec![shape[0], spec.r]),
            b: TensorData::zeros(vec![spec.r, shape[1]]),
            r: spec.r,
            alpha: spec.alpha,
        });
    }
    if !meta.adapters.is_empty() {
        for p in &mut model.params {
            p.trainable = false;
        }
    }

    for spec in &meta.arrays {
        let dest = model.array_mut(&spec.name).ok_or_else(|| {
            format_error(path, &format!("manifest names unknown array `{}`", spec.name))
        })?;
        if dest.shape() != spec.shape {
            return Err(format_error(
                path,
                &format!(
                    "array `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    spec.shape,
                    dest.shape()
                ),
            ));
        }
        let mut buf = vec![0u8; dest.numel() * 4];
        file.read_exact(&mut buf)
            .map_err(|_| format_error(path, &format!("truncated array `{}`", spec.name)))?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            dest.data_mut()[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(format_error(path, "trailing bytes after arrays"));
    }
    Ok((model, meta))
}

fn format_error(path: &Path, message: &str) -> Error {
    Error::Format(format!("{}: {message}", path.display()))
}
