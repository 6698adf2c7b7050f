//! Checkpoint file format.
//!
//! ```text
//! "VFD1"
//! u32 le: metadata length, then that many bytes of metadata JSON
//!         { format, step, seed, rng_word_pos, meta }
//! u32 le: tensor count
//! per tensor:
//!   u32 le name length, name (utf-8)
//!   u32 le rank, rank x u32 le extents
//!   extent-product x f32 le payload
//! ```
//!
//! Tensors carry the parameter registry names plus `adam.m.*` / `adam.v.*`
//! optimizer moments. Loading validates every shape against a
//! config-initialized parameter set.

use super::train::{init_model_params, resume_rng, ModelParams, TrainState};
use super::unet::ModelDims;
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VFD1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format: u32,
    step: u64,
    seed: u64,
    /// ChaCha word position, decimal-encoded (u128 exceeds JSON numbers).
    rng_word_pos: String,
    /// Caller-supplied configuration echo.
    meta: serde_json::Value,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, shape.len() as u32)?;
    for &e in shape {
        write_u32(w, e as u32)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

/// Serializes the state (parameters, optimizer moments, counters, RNG
/// position) plus an arbitrary JSON `meta` block, typically the run config.
pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    state.params.visit(&mut |name, t| {
        tensors.push((name, t.shape().to_vec(), t.data().to_vec()));
    });
    for (name, buf) in &state.adam.m {
        tensors.push((format!("adam.m.{name}"), vec![buf.len()], buf.clone()));
    }
    for (name, buf) in &state.adam.v {
        tensors.push((format!("adam.v.{name}"), vec![buf.len()], buf.clone()));
    }

    let metadata = Metadata {
        format: 1,
        step: state.step,
        seed: state.seed,
        rng_word_pos: state.rng.get_word_pos().to_string(),
        meta: meta.clone(),
    };
    let meta_bytes = serde_json::to_vec(&metadata)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut out, meta_bytes.len() as u32)?;
    out.extend_from_slice(&meta_bytes);
    write_u32(&mut out, tensors.len() as u32)?;
    for (name, shape, data) in &tensors {
        write_tensor(&mut out, name, shape, data)?;
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back, validating each tensor's shape against a
/// parameter set initialized from `dims`. Returns the reconstructed state
/// and the stored `meta` block.
pub fn load_checkpoint(
    path: &Path,
    dims: &ModelDims,
) -> Result<(TrainState, serde_json::Value), CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut cursor = std::io::Cursor::new(&bytes[..]);
    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = read_u32(&mut cursor)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cursor.read_exact(&mut meta_bytes)?;
    let metadata: Metadata = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if metadata.format != 1 {
        return Err(CheckpointError::Corrupt(format!(
            "unknown format {}",
            metadata.format
        )));
    }
    let word_pos: u128 = metadata
        .rng_word_pos
        .parse()
        .map_err(|_| CheckpointError::Corrupt("bad rng position".into()))?;

    let count = read_u32(&mut cursor)? as usize;
    let mut stored: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cursor)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cursor.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("tensor name not utf-8".into()))?;
        let rank = read_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cursor)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        cursor.read_exact(&mut payload)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        stored.insert(name, (shape, data));
    }

    // Shape template from the config, overwritten by stored values.
    let mut params: ModelParams<Tensor<f32>> =
        init_model_params(dims, &mut rng::seeded(0));
    let mut missing: Vec<String> = Vec::new();
    let mut mismatch: Vec<String> = Vec::new();
    params.visit_mut(&mut |name, t| match stored.get(&name) {
        None => missing.push(name),
        Some((shape, data)) => {
            if shape != t.shape() {
                mismatch.push(format!(
                    "{name}: stored {shape:?}, config expects {:?}",
                    t.shape()
                ));
            } else {
                t.data_mut().copy_from_slice(data);
            }
        }
    });
    if !missing.is_empty() {
        return Err(CheckpointError::Mismatch(format!(
            "missing tensors: {missing:?}"
        )));
    }
    if !mismatch.is_empty() {
        return Err(CheckpointError::Mismatch(mismatch.join("; ")));
    }

    let mut adam = super::train::AdamState::default();
    for (name, (shape, data)) in &stored {
        if let Some(param) = name.strip_prefix("adam.m.") {
            let _ = shape;
            adam.m.insert(param.to_string(), data.clone());
        } else if let Some(param) = name.strip_prefix("adam.v.") {
            adam.v.insert(param.to_string(), data.clone());
        }
    }

    let state = TrainState {
        params,
        adam,
        step: metadata.step,
        seed: metadata.seed,
        rng: resume_rng(metadata.seed, word_pos),
    };
    Ok((state, metadata.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::CondDims;
    use crate::diffusion::train::init_model_params;

    fn dims16() -> ModelDims {
        ModelDims {
            c1: 8,
            c2: 16,
            d_time: 16,
            groups: 4,
            cond: CondDims {
                d_ctx: 12,
                d_embed: 10,
                n_tok: 4,
                resolution: 16,
            },
        }
    }

    #[test]
    fn roundtrips_state_bitwise() {
        let dims = dims16();
        let mut r = rng::seeded(1);
        let params = init_model_params::<f32>(&dims, &mut r);
        let mut state = TrainState::new(params, 42);
        state.step = 137;
        state.adam.m.insert("unet.conv_in.w".into(), vec![0.5; 8 * 3 * 9]);
        state.adam.v.insert("unet.conv_in.w".into(), vec![0.25; 8 * 3 * 9]);
        // Advance the rng so the word position is nontrivial.
        use rand::Rng;
        let _: [f64; 7] = std::array::from_fn(|_| state.rng.gen());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.vfd");
        let meta = serde_json::json!({"mode": "b"});
        save_checkpoint(&path, &state, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&path, &dims).unwrap();

        assert_eq!(loaded.step, 137);
        assert_eq!(loaded.seed, 42);
        assert_eq!(meta2, meta);
        assert_eq!(loaded.rng.get_word_pos(), state.rng.get_word_pos());
        assert_eq!(loaded.adam.m["unet.conv_in.w"], vec![0.5; 8 * 3 * 9]);
        let mut want: Vec<(String, Vec<f32>)> = Vec::new();
        state
            .params
            .visit(&mut |n, t| want.push((n, t.data().to_vec())));
        let mut got: Vec<(String, Vec<f32>)> = Vec::new();
        loaded
            .params
            .visit(&mut |n, t| got.push((n, t.data().to_vec())));
        assert_eq!(want, got);
        // RNG continues identically after resume.
        let mut a = state.rng.clone();
        let mut b = loaded.rng.clone();
        let x: f64 = a.gen();
        let y: f64 = b.gen();
        assert_eq!(x, y);
    }

    #[test]
    fn magic_and_shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vfd");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&path, &dims16()),
            Err(CheckpointError::BadMagic)
        ));

        // Saved under one geometry, loaded under another: shape mismatch.
        let dims = dims16();
        let mut r = rng::seeded(2);
        let state = TrainState::new(init_model_params::<f32>(&dims, &mut r), 1);
        let path = dir.path().join("ok.vfd");
        save_checkpoint(&path, &state, &serde_json::Value::Null).unwrap();
        let mut other = dims16();
        other.c1 = 16;
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(CheckpointError::Mismatch(_))
        ));
    }
}
