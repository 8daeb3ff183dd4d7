//! Binary checkpoint: magic, format version, JSON config, then every tensor
//! as a little-endian length-prefixed f64 array in [`ModelState::tensors`]
//! order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ClassifierHead, ConvBackbone, ModelConfig, ModelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LLCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl ModelState {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut v = [0u8; 4];
        read_exact(r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = read_u64(r)? as usize;
        if len > 1 << 24 {
            return Err(Error::Checkpoint("config block too large".into()));
        }
        let mut config = vec![0u8; len];
        read_exact(r, &mut config)?;
        let config: ModelConfig =
            serde_json::from_slice(&config).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;

        let k = config
            .backbone
            .feature_shape()
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .0;
        let mut state = ModelState {
            backbone: ConvBackbone::zeros(config.backbone.clone())?,
            head_global: ClassifierHead::zeros(config.classes, k),
            head_rv: ClassifierHead::zeros(config.classes, k),
            config,
        };
        let count = read_u64(r)? as usize;
        let mut tensors = state.tensors_mut();
        if count != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, config implies {}",
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter_mut().enumerate() {
            let n = read_u64(r)? as usize;
            if n != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} has {n} values, expected {}",
                    t.len()
                )));
            }
            let mut b = [0u8; 8];
            for v in t.iter_mut() {
                read_exact(r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
