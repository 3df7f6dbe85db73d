//! Checkpoint persistence. Fixed little-endian binary layout so
//! save -> load -> save is byte-identical: magic, version, config JSON, step
//! counter, RNG position, then a named tensor table holding the parameters
//! and both Adam moment buffers.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{TrainConfig, TrainError, TrainState};
use crate::model::ModelParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} not supported (expect {expect})")]
    VersionMismatch { found: u16, expect: u16 },
}

/// A full training snapshot: resuming from it continues bit-identically.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam_m: ModelParams,
    pub adam_v: ModelParams,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
}

impl Checkpoint {
    pub fn from_state(config: &TrainConfig, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            params: state.params.clone(),
            adam_m: state.adam_m.clone(),
            adam_v: state.adam_v.clone(),
            step: state.step,
            rng_seed: state.rng.get_seed(),
            rng_word_pos: state.rng.get_word_pos(),
            rng_stream: state.rng.get_stream(),
        }
    }

    pub fn into_state(self) -> Result<TrainState, TrainError> {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        Ok(TrainState {
            params: self.params,
            adam_m: self.adam_m,
            adam_v: self.adam_v,
            step: self.step,
            rng,
        })
    }
}

fn write_tensors(buf: &mut Vec<u8>, prefix: &str, p: &ModelParams) {
    for (name, shape, data) in p.param_slices() {
        let full = format!("{prefix}{name}");
        buf.extend_from_slice(&(full.len() as u16).to_le_bytes());
        buf.extend_from_slice(full.as_bytes());
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_string(&ckpt.config)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_seed);
    buf.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_stream.to_le_bytes());
    let n_tensors = ckpt.params.param_slices().len() * 3;
    buf.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    write_tensors(&mut buf, "", &ckpt.params);
    write_tensors(&mut buf, "adam_m.", &ckpt.adam_m);
    write_tensors(&mut buf, "adam_v.", &ckpt.adam_v);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of file at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_into(
    cur: &mut Cursor,
    expected_name: &str,
    shape: &[usize],
    dst: &mut [f64],
) -> Result<(), CheckpointError> {
    let name_len = cur.u16()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if name != expected_name {
        return Err(CheckpointError::Corrupt(format!(
            "tensor order mismatch: found {name}, expected {expected_name}"
        )));
    }
    let ndim = cur.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(cur.u32()? as usize);
    }
    if dims != shape {
        return Err(CheckpointError::Corrupt(format!(
            "tensor {name} shape {dims:?}, expected {shape:?}"
        )));
    }
    let count = cur.u64()? as usize;
    if count != dst.len() {
        return Err(CheckpointError::Corrupt(format!(
            "tensor {name} has {count} values, expected {}",
            dst.len()
        )));
    }
    for v in dst.iter_mut() {
        *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    }
    Ok(())
}

fn read_tensors(
    cur: &mut Cursor,
    prefix: &str,
    p: &mut ModelParams,
) -> Result<(), CheckpointError> {
    for (name, shape, data) in p.param_slices_mut() {
        read_into(cur, &format!("{prefix}{name}"), &shape, data)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expect: CHECKPOINT_VERSION });
    }
    let cfg_len = cur.u32()? as usize;
    let cfg_str = std::str::from_utf8(cur.take(cfg_len)?)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let config: TrainConfig =
        serde_json::from_str(cfg_str).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let step = cur.u64()?;
    let rng_seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
    let rng_stream = cur.u64()?;
    let n_tensors = cur.u32()? as usize;
    let mut params = ModelParams::zeros(&config.model);
    let mut adam_m = ModelParams::zeros(&config.model);
    let mut adam_v = ModelParams::zeros(&config.model);
    if n_tensors != params.param_slices().len() * 3 {
        return Err(CheckpointError::Corrupt(format!(
            "tensor count {n_tensors} does not match config"
        )));
    }
    read_tensors(&mut cur, "", &mut params)?;
    read_tensors(&mut cur, "adam_m.", &mut adam_m)?;
    read_tensors(&mut cur, "adam_v.", &mut adam_v)?;
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint { config, params, adam_m, adam_v, step, rng_seed, rng_word_pos, rng_stream })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests_support::tiny_checkpoint;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = tiny_checkpoint();
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(ckpt.params, loaded.params);
        assert_eq!(ckpt.adam_m, loaded.adam_m);
        assert_eq!(ckpt.step, loaded.step);
        assert_eq!(ckpt.rng_word_pos, loaded.rng_word_pos);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&tiny_checkpoint(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn wrong_version_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&tiny_checkpoint(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncation_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&tiny_checkpoint(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::Corrupt(_))));
    }
}
