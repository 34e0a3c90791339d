//! Checkpoint directory layout:
//!
//! - `manifest.json`: format version, training config, counters, random
//!   stream states, metric log and a table of `{name, shape, offset}`
//!   entries (offsets in bytes into the buffer).
//! - `tensors.bin`: every parameter and Adam moment as little-endian `f64`.
//!
//! Tensor names are `<model>.<param>` for weights and
//! `adam.<model>.{m,v}.<param>` for optimizer moments, where `<model>` is
//! `generator`, `melody` or `rhythm`.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{params_of, Phase, RngStreams, StepMetrics, TrainError, TrainState, TrainingConfig};
use crate::model::NamedParams;
use crate::tensor::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BUFFER: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptCheckpoint(msg.into())
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Counters {
    step: u64,
    nll_steps: u64,
    disc_steps: u64,
    adv_steps: u64,
    epoch: u64,
    cursor: usize,
    phase_start_epoch: u64,
    generator_adam_steps: u64,
    melody_adam_steps: u64,
    rhythm_adam_steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainingConfig,
    counters: Counters,
    phase: Option<Phase>,
    permutation: Vec<usize>,
    recent_nll: Vec<f64>,
    rngs: RngStreams,
    buffer_len: u64,
    tensors: Vec<TensorEntry>,
    log: Vec<StepMetrics>,
}

/// Every tensor of the state with its checkpoint name, in a fixed order.
fn named_tensors(state: &TrainState) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let models: [(&str, NamedParams, &Adam); 3] = [
        ("generator", state.generator.params(), &state.gen_opt),
        ("melody", state.melody.params(), &state.melody_opt),
        ("rhythm", state.rhythm.params(), &state.rhythm_opt),
    ];
    for (model, params, opt) in &models {
        for (name, t) in params {
            out.push((format!("{model}.{name}"), t.shape().to_vec(), t.to_vec()));
        }
        for (k, (name, t)) in params.iter().enumerate() {
            out.push((format!("adam.{model}.m.{name}"), t.shape().to_vec(), opt.state.m[k].clone()));
            out.push((format!("adam.{model}.v.{name}"), t.shape().to_vec(), opt.state.v[k].clone()));
        }
    }
    out
}

/// Writes `state` into the directory `dir`, creating it if needed.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut buffer = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in named_tensors(state) {
        tensors.push(TensorEntry { name, shape, offset: buffer.len() as u64 });
        for x in data {
            buffer.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        counters: Counters {
            step: state.step,
            nll_steps: state.nll_steps,
            disc_steps: state.disc_steps,
            adv_steps: state.adv_steps,
            epoch: state.epoch,
            cursor: state.cursor,
            phase_start_epoch: state.phase_start_epoch,
            generator_adam_steps: state.gen_opt.state.step,
            melody_adam_steps: state.melody_opt.state.step,
            rhythm_adam_steps: state.rhythm_opt.state.step,
        },
        phase: state.phase,
        permutation: state.permutation.clone(),
        recent_nll: state.recent_nll.iter().copied().collect(),
        rngs: state.rngs.clone(),
        buffer_len: buffer.len() as u64,
        tensors,
        log: state.log.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| corrupt(e.to_string()))?;
    fs::write(dir.join(BUFFER), &buffer)?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<TrainState, CheckpointError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("manifest has no version"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(CheckpointError::VersionMismatch { found: version as u32, expected: CHECKPOINT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let buffer = fs::read(dir.join(BUFFER))?;
    decode(manifest, &buffer)
}

fn decode(manifest: Manifest, buffer: &[u8]) -> Result<TrainState, CheckpointError> {
    if buffer.len() as u64 != manifest.buffer_len {
        return Err(corrupt(format!("buffer holds {} bytes, manifest expects {}", buffer.len(), manifest.buffer_len)));
    }
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>, CheckpointError> {
        let e = entries.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        let n: usize = shape.iter().product();
        let start = usize::try_from(e.offset).map_err(|_| corrupt("offset overflow"))?;
        let end = start.checked_add(n * 8).filter(|&end| end <= buffer.len());
        let end = end.ok_or_else(|| corrupt(format!("tensor {name} runs past the end of the buffer")))?;
        Ok(buffer[start..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    };

    let mut state = TrainState::new(manifest.config.clone())?;
    let c = &manifest.counters;
    {
        let mut models: [(&str, NamedParams, &mut Adam, u64); 3] = [
            ("generator", state.generator.params(), &mut state.gen_opt, c.generator_adam_steps),
            ("melody", state.melody.params(), &mut state.melody_opt, c.melody_adam_steps),
            ("rhythm", state.rhythm.params(), &mut state.rhythm_opt, c.rhythm_adam_steps),
        ];
        for (model, params, opt, steps) in models.iter_mut() {
            for (k, (name, t)) in params.iter().enumerate() {
                let shape = t.shape().to_vec();
                *t.data_mut() = read(&format!("{model}.{name}"), &shape)?;
                opt.state.m[k] = read(&format!("adam.{model}.m.{name}"), &shape)?;
                opt.state.v[k] = read(&format!("adam.{model}.v.{name}"), &shape)?;
            }
            opt.state.step = *steps;
            debug_assert_eq!(opt.state.m.len(), params_of(params).len());
        }
    }
    if manifest.tensors.len() != entries.len() || entries.len() != named_tensors(&state).len() {
        return Err(corrupt("tensor table does not match the model configuration"));
    }
    state.step = c.step;
    state.nll_steps = c.nll_steps;
    state.disc_steps = c.disc_steps;
    state.adv_steps = c.adv_steps;
    state.epoch = c.epoch;
    state.cursor = c.cursor;
    state.phase_start_epoch = c.phase_start_epoch;
    state.phase = manifest.phase;
    state.permutation = manifest.permutation;
    state.recent_nll = VecDeque::from(manifest.recent_nll);
    state.rngs = manifest.rngs;
    state.log = manifest.log;
    Ok(state)
}
