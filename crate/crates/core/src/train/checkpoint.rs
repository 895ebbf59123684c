//! `.samtl` checkpoints: one line of JSON header, then every parameter as
//! little-endian `f32` in header order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "samtl";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub vocab_size: usize,
    pub task_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Weights plus the task names their heads predict.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub task_names: Vec<String>,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams<f32>, task_names: &[String]) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        config_hash: params.config.hash(),
        vocab_size: params.vocab_size,
        task_names: task_names.to_vec(),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(params.param_count() * 4);
    for t in params.tensors() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let bad = |m: String| TrainError::Checkpoint(m);
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader = serde_json::from_slice(&line).map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.config.hash() != header.config_hash {
        return Err(bad("config hash does not match the stored config".into()));
    }
    if header.task_names.len() != header.config.num_tasks {
        return Err(bad(format!("{} task names for {} heads", header.task_names.len(), header.config.num_tasks)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 4 {
        return Err(bad(format!("payload holds {} bytes, header describes {}", payload.len(), expected * 4)));
    }
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut entries = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        entries.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let params = ModelParams::from_parts(header.config, header.vocab_size, entries)?;
    Ok(Checkpoint { params, task_names: header.task_names })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, task_names: &[String]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), params, task_names)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::fs::File::open(path)?)
}
