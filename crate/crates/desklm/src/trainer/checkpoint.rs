//! Binary checkpoints: a versioned header followed by named tensors.
//!
//! Layout (little-endian): u32 format_version, u32 config JSON length +
//! bytes, u64 step, u32 stage-name length + bytes, u64 rng_seed,
//! u64 tensor count, then per tensor `{u64 name length, name bytes,
//! u64 rank, u64 extents..., f32 data}`. Model tensors and optimizer state
//! tensors (`.momentum`, `.row_v`, `.m`, `.v`, `.step` suffixes) share the
//! same encoding.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TrainError;
use crate::model::ModelConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Suffixes marking optimizer-state tensors inside a checkpoint.
pub const OPTIMIZER_SUFFIXES: [&str; 5] = [".momentum", ".row_v", ".m", ".v", ".step"];

pub fn is_optimizer_tensor(name: &str) -> bool {
    OPTIMIZER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub stage: String,
    pub rng_seed: u64,
}

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Writes to a temp file in the target directory, then atomically renames.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &TensorMap,
) -> Result<(), TrainError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(&meta.format_version.to_le_bytes())?;
        let config_json = serde_json::to_vec(&meta.config)
            .map_err(|e| TrainError::Checkpoint(format!("config serialization: {e}")))?;
        w.write_all(&(config_json.len() as u32).to_le_bytes())?;
        w.write_all(&config_json)?;
        w.write_all(&meta.step.to_le_bytes())?;
        let stage = meta.stage.as_bytes();
        w.write_all(&(stage.len() as u32).to_le_bytes())?;
        w.write_all(stage)?;
        w.write_all(&meta.rng_seed.to_le_bytes())?;
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for (name, (shape, data)) in tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for &ext in shape {
                w.write_all(&(ext as u64).to_le_bytes())?;
            }
            let expect: usize = shape.iter().product();
            if expect != data.len() {
                return Err(TrainError::Checkpoint(format!(
                    "tensor `{name}`: {} values for shape {shape:?}",
                    data.len()
                )));
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, TensorMap), TrainError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)
        .map_err(|_| TrainError::Checkpoint("truncated config".into()))?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| TrainError::Checkpoint(format!("bad config JSON: {e}")))?;
    let step = read_u64(&mut r)?;
    let stage_len = read_u32(&mut r)? as usize;
    let mut stage_bytes = vec![0u8; stage_len];
    r.read_exact(&mut stage_bytes)
        .map_err(|_| TrainError::Checkpoint("truncated stage name".into()))?;
    let stage = String::from_utf8(stage_bytes)
        .map_err(|_| TrainError::Checkpoint("stage name not UTF-8".into()))?;
    let rng_seed = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| TrainError::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TrainError::Checkpoint("tensor name not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| TrainError::Checkpoint(format!("truncated data in `{name}`")))?;
            data.push(f32::from_le_bytes(buf));
        }
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(TrainError::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok((CheckpointMeta { format_version: version, config, step, stage, rng_seed }, tensors))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| TrainError::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| TrainError::Checkpoint("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}
