//! Checkpoints: a TOML manifest naming every tensor (name, shape, byte
//! offset) plus one little-endian raw blob of f64 values. Round trips are
//! bit-exact. Optimizer moments and the training RNG ride in the same
//! format so a run can resume exactly where it stopped.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::Storage;
use crate::train::{Adam, EpochMetrics, Moments, OptimConfig, TrainState};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("blob holds {got} bytes, manifest expects {expected}")]
    BlobLength { expected: u64, got: u64 },
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("tensor {name}: checkpoint shape {stored:?} does not fit model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid RNG state: {0}")]
    BadRngState(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset_bytes: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainStateMeta {
    optim: OptimConfig,
    step: u64,
    epoch: usize,
    rng_seed_hex: String,
    rng_word_pos: String,
    metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<TrainStateMeta>,
}

struct BlobWriter {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        BlobWriter {
            entries: Vec::new(),
            bytes: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset_bytes: self.bytes.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensor(blob: &[u8], entry: &TensorEntry) -> Result<Vec<f64>, CheckpointError> {
    let start = entry.offset_bytes as usize;
    let end = start + entry.len as usize * 8;
    if end > blob.len() {
        return Err(CheckpointError::BlobLength {
            expected: end as u64,
            got: blob.len() as u64,
        });
    }
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
        .collect())
}

fn write_files(dir: &Path, manifest: &Manifest, blob: &[u8]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    let mut f = fs::File::create(dir.join(WEIGHTS_FILE))?;
    f.write_all(blob)?;
    Ok(())
}

fn read_files(dir: &Path) -> Result<(Manifest, Vec<u8>), CheckpointError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(manifest.format_version));
    }
    let mut blob = Vec::new();
    fs::File::open(dir.join(WEIGHTS_FILE))?.read_to_end(&mut blob)?;
    let expected: u64 = manifest
        .tensors
        .iter()
        .map(|t| t.offset_bytes + t.len * 8)
        .max()
        .unwrap_or(0);
    if blob.len() as u64 != expected {
        return Err(CheckpointError::BlobLength {
            expected,
            got: blob.len() as u64,
        });
    }
    Ok((manifest, blob))
}

fn model_entries(model: &Model, blob: &mut BlobWriter) {
    for (name, id) in model.named_params() {
        let v = model.params().value(id);
        blob.push(&name, v.shape(), v.data());
    }
}

/// Saves model parameters and config.
pub fn save_model(model: &Model, dir: &Path) -> Result<(), CheckpointError> {
    let mut blob = BlobWriter::new();
    model_entries(model, &mut blob);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        tensors: blob.entries,
        train_state: None,
    };
    write_files(dir, &manifest, &blob.bytes)
}

/// Saves model plus optimizer moments, RNG state and metric history.
pub fn save_train_state(
    model: &Model,
    state: &TrainState,
    dir: &Path,
) -> Result<(), CheckpointError> {
    let mut blob = BlobWriter::new();
    model_entries(model, &mut blob);
    let name_of: HashMap<_, _> = model.named_params().into_iter().map(|(n, id)| (id, n)).collect();
    let mut moment_ids: Vec<_> = state.optimizer.moments.keys().copied().collect();
    moment_ids.sort_unstable();
    for id in moment_ids {
        let name = name_of
            .get(&id)
            .cloned()
            .unwrap_or_else(|| format!("param{}", id_index(id)));
        let moments = &state.optimizer.moments[&id];
        blob.push(&format!("opt.m.{name}"), &[moments.m.len()], &moments.m);
        blob.push(&format!("opt.v.{name}"), &[moments.v.len()], &moments.v);
    }
    let seed_hex: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        tensors: blob.entries,
        train_state: Some(TrainStateMeta {
            optim: state.optimizer.config.clone(),
            step: state.optimizer.step,
            epoch: state.epoch,
            rng_seed_hex: seed_hex,
            rng_word_pos: state.rng.get_word_pos().to_string(),
            metrics: state.metrics.clone(),
        }),
    };
    write_files(dir, &manifest, &blob.bytes)
}

fn id_index(id: crate::model::ParamId) -> usize {
    // fallback label for moments of parameters outside the walk
    format!("{id:?}")
        .trim_start_matches("ParamId(")
        .trim_end_matches(')')
        .parse()
        .unwrap_or(usize::MAX)
}

/// Rebuilds the model from the stored config and loads every tensor.
pub fn load_model(dir: &Path) -> Result<Model, CheckpointError> {
    let (manifest, blob) = read_files(dir)?;
    let mut model = Model::new(manifest.model.clone(), 0)?;
    fill_params(&mut model, &manifest, &blob)?;
    Ok(model)
}

/// Loads tensors into an existing model; every model parameter must match a
/// stored entry in name and shape.
pub fn load_into(model: &mut Model, dir: &Path) -> Result<(), CheckpointError> {
    let (manifest, blob) = read_files(dir)?;
    fill_params(model, &manifest, &blob)
}

fn fill_params(model: &mut Model, manifest: &Manifest, blob: &[u8]) -> Result<(), CheckpointError> {
    let by_name: HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let named = model.named_params();
    // validate everything before mutating
    for (name, id) in &named {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        let expected = model.params().value(*id).shape();
        if entry.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                stored: entry.shape.clone(),
                expected: expected.to_vec(),
            });
        }
    }
    for (name, id) in &named {
        let entry = by_name[name.as_str()];
        let data = read_tensor(blob, entry)?;
        model
            .params_mut()
            .set_value(*id, Storage::new(entry.shape.clone(), data).expect("validated length"));
    }
    Ok(())
}

/// Restores the training state saved next to the model tensors.
pub fn load_train_state(dir: &Path, model: &Model) -> Result<TrainState, CheckpointError> {
    let (manifest, blob) = read_files(dir)?;
    let meta = manifest
        .train_state
        .as_ref()
        .ok_or_else(|| CheckpointError::Manifest("no train_state section".into()))?;
    let by_name: HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let mut optimizer = Adam::new(meta.optim.clone());
    optimizer.step = meta.step;
    for (name, id) in model.named_params() {
        let m_name = format!("opt.m.{name}");
        let v_name = format!("opt.v.{name}");
        if let (Some(m), Some(v)) = (by_name.get(m_name.as_str()), by_name.get(v_name.as_str())) {
            optimizer.moments.insert(
                id,
                Moments {
                    m: read_tensor(&blob, m)?,
                    v: read_tensor(&blob, v)?,
                },
            );
        }
    }
    if meta.rng_seed_hex.len() != 64 {
        return Err(CheckpointError::BadRngState("seed must be 32 bytes".into()));
    }
    let mut seed = [0u8; 32];
    for (i, byte) in seed.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&meta.rng_seed_hex[2 * i..2 * i + 2], 16)
            .map_err(|e| CheckpointError::BadRngState(e.to_string()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    let pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| CheckpointError::BadRngState("bad word position".into()))?;
    rng.set_word_pos(pos);
    Ok(TrainState {
        optimizer,
        epoch: meta.epoch,
        rng,
        metrics: meta.metrics.clone(),
        best_val_loss: f64::INFINITY,
        best_epoch: meta.epoch,
        best_params: None,
    })
}
