//! Checkpoint container.
//!
//! Layout: `u64` little-endian header length `H`, then `H` bytes of UTF-8 JSON
//! header, then the raw little-endian tensor payloads back to back. The header
//! carries the format version, a config echo, scheduler counters and one
//! `{name, dtype, shape, offset}` record per tensor; offsets are relative to
//! the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Moment, TrainConfig, TrainState, Verbalizers};
use crate::prompts::{init_pool, PromptLengths, PromptMode, PromptPool, TaskSpec};
use crate::ulm::{UlmConfig, UlmParameters};
use crate::verbalizer::Verbalizer;
use crate::{Error, Real, Result};

const FORMAT: &str = "unitprompt-checkpoint";
const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub model: UlmParameters<F>,
    pub tasks: Vec<TaskSpec>,
    pub pool: PromptPool<F>,
    pub verbalizers: Verbalizers<F>,
    pub state: TrainState<F>,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    model: UlmConfig,
    prompt: PromptHeader,
    train: TrainConfig,
    state: StateHeader,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct PromptHeader {
    lengths: PromptLengths,
    mode: PromptMode,
    tasks: Vec<TaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    current_lr: f64,
    /// `None` encodes "no validation loss seen yet".
    best_val_loss: Option<f64>,
    epochs_since_improvement: usize,
    plateau_count: usize,
    step: u64,
    moments: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn collect_tensors<'a, F: Real>(ck: &'a Checkpoint<F>) -> Vec<(String, ArrayViewD<'a, F>)> {
    let mut out = Vec::new();
    ck.model.visit(&mut |n, t| out.push((n, t)));
    ck.pool.visit(&mut |n, t| out.push((n, t)));
    for vb in ck.verbalizers.values() {
        vb.visit(&mut |n, t| out.push((n, t)));
    }
    for m in &ck.state.moments {
        out.push((format!("adam.m.{}", m.name), m.m.view()));
        out.push((format!("adam.v.{}", m.name), m.v.view()));
    }
    out
}

/// Serializes `ck` to bytes.
pub fn checkpoint_bytes<F: Real>(ck: &Checkpoint<F>) -> Result<Vec<u8>> {
    let tensors = collect_tensors(ck);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: F::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.len() * F::BYTES) as u64;
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: F::DTYPE.to_string(),
        model: ck.model.config.clone(),
        prompt: PromptHeader {
            lengths: ck.pool.lengths,
            mode: ck.pool.mode,
            tasks: ck.tasks.clone(),
        },
        train: ck.train_config.clone(),
        state: StateHeader {
            epoch: ck.state.epoch,
            current_lr: ck.state.current_lr,
            best_val_loss: ck.state.best_val_loss.is_finite().then_some(ck.state.best_val_loss),
            epochs_since_improvement: ck.state.epochs_since_improvement,
            plateau_count: ck.state.plateau_count,
            step: ck.state.step,
            moments: ck.state.moments.iter().map(|m| m.name.clone()).collect(),
        },
        tensors: entries,
    };
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: Real>(path: &Path, ck: &Checkpoint<F>) -> Result<()> {
    let bytes = checkpoint_bytes(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Truncated);
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if rest.len() < len {
        return Err(Error::Truncated);
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::BadMagic);
    }
    if header.version != VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: VERSION,
        });
    }
    Ok((header, &rest[len..]))
}

/// Element type stored in a checkpoint file (`"f32"` or `"f64"`).
pub fn read_checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes)?.0.dtype)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let (header, payload) = parse_header(bytes)?;
    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {}, requested {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let mut stored: BTreeMap<&str, ArrayD<F>> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * F::BYTES;
        if end > payload.len() {
            return Err(Error::Truncated);
        }
        let data: Vec<F> = payload[start..end].chunks_exact(F::BYTES).map(F::read_le).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        stored.insert(e.name.as_str(), arr);
    }

    let cfg = header.model.clone();
    let mut model = UlmParameters::<F>::zeros(&cfg)?;
    let mut pool = init_pool::<F>(&header.prompt.tasks, header.prompt.lengths, header.prompt.mode, &cfg, 0)?;
    let mut verbalizers: Verbalizers<F> = header
        .prompt
        .tasks
        .iter()
        .map(|t| (t.id(), Verbalizer::new(t, cfg.vocab_size, 0)))
        .collect();
    let mut failure: Option<Error> = None;
    let mut fill = |name: String, mut t: ndarray::ArrayViewMutD<'_, F>| {
        if failure.is_some() {
            return;
        }
        match stored.get(name.as_str()) {
            None => failure = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(src) if src.shape() != t.shape() => {
                failure = Some(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )))
            }
            Some(src) => t.assign(src),
        }
    };
    model.visit_mut(&mut fill);
    pool.visit_mut(&mut fill);
    for vb in verbalizers.values_mut() {
        vb.visit_mut(&mut fill);
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let mut moments = Vec::with_capacity(header.state.moments.len());
    for name in &header.state.moments {
        let get = |k: String| {
            stored
                .get(k.as_str())
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))
        };
        moments.push(Moment {
            name: name.clone(),
            m: get(format!("adam.m.{name}"))?,
            v: get(format!("adam.v.{name}"))?,
        });
    }
    let st = &header.state;
    Ok(Checkpoint {
        model,
        tasks: header.prompt.tasks.clone(),
        pool,
        verbalizers,
        state: TrainState {
            epoch: st.epoch,
            current_lr: st.current_lr,
            best_val_loss: st.best_val_loss.unwrap_or(f64::INFINITY),
            epochs_since_improvement: st.epochs_since_improvement,
            plateau_count: st.plateau_count,
            step: st.step,
            moments,
        },
        train_config: header.train,
    })
}

/// Header bytes (length prefix included) and total payload bytes of `ck`.
pub fn checkpoint_layout<F: Real>(ck: &Checkpoint<F>) -> Result<(usize, usize)> {
    let bytes = checkpoint_bytes(ck)?;
    let h = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    Ok((8 + h, bytes.len() - 8 - h))
}
