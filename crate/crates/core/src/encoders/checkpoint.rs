//! Versioned binary checkpoint container.
//!
//! Layout: the magic string `HMID1`, a JSON meta block (config, frozen
//! flag, role, gate metrics), an entry manifest (name, dtype, shape, byte
//! offset), then the little-endian float32 buffers. Loading reconstructs
//! the model skeleton from the config and fills values by name, so decay
//! and trainable flags never need to be serialized; a frozen checkpoint
//! loads with every parameter marked untrainable.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::RawTensor;
use crate::Scalar;

use super::{EncoderConfig, Model};

pub const MAGIC: &[u8; 5] = b"HMID1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("meta block: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint parameter {name} not in model built from its config")]
    UnknownParam { name: String },
    #[error("parameter {name}: stored shape {stored:?} vs model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("model parameter {name} missing from checkpoint")]
    MissingParam { name: String },
    #[error(transparent)]
    Encoder(#[from] super::EncoderError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub frozen: bool,
    /// Free-form provenance: "student", "teacher", "clip-baseline", ...
    pub role: String,
    /// Validation retrieval recall@1 measured after training, if any; the
    /// distillation gate reads this.
    pub val_recall_at_1: Option<f64>,
    pub seed: u64,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CheckpointError {
    let context = context.into();
    move |source| CheckpointError::Io { context, source }
}

pub fn save<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (_, entry) in model.store.iter() {
        let offset = payload.len() as u64;
        for v in entry.value.data() {
            let f = v.to_f64().expect("finite parameter") as f32;
            payload.extend_from_slice(&f.to_le_bytes());
        }
        manifest.push((entry.name.clone(), entry.value.shape().to_vec(), offset));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, shape, offset) in &manifest {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0u8); // dtype: f32
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.data.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
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

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointMeta), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(format!("reading {}", path.display())))?;
    let mut cur = Cursor {
        data: &bytes,
        at: 0,
    };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    let n_entries = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("entry name not utf8".into()))?;
        let dtype = cur.u8()?;
        if dtype != 0 {
            return Err(CheckpointError::Corrupt(format!(
                "unsupported dtype {dtype} for {name}"
            )));
        }
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let offset = cur.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[cur.at..];

    let mut model = Model::<S>::new(meta.config.clone(), 0)?;
    let mut filled = vec![false; model.store.len()];
    for (name, shape, offset) in manifest {
        let Some(slot) = model.store.slot_by_name(&name) else {
            return Err(CheckpointError::UnknownParam { name });
        };
        let expected = model.store.entry(slot).value.shape().to_vec();
        if expected != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                stored: shape,
                expected,
            });
        }
        let numel: usize = shape.iter().product();
        let end = offset + numel * 4;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "buffer for {name} out of range"
            )));
        }
        let data: Vec<S> = payload[offset..end]
            .chunks_exact(4)
            .map(|b| crate::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        model.store.entry_mut(slot).value =
            RawTensor::new(&shape, data).expect("validated shape");
        filled[slot] = true;
    }
    if let Some((slot, _)) = filled.iter().enumerate().find(|(_, f)| !**f) {
        return Err(CheckpointError::MissingParam {
            name: model.store.entry(slot).name.clone(),
        });
    }
    if meta.frozen {
        model.freeze();
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("hmid-ckpt-{tag}-{}.bin", std::process::id()))
    }

    fn meta(config: EncoderConfig, frozen: bool) -> CheckpointMeta {
        CheckpointMeta {
            config,
            frozen,
            role: "student".into(),
            val_recall_at_1: Some(0.93),
            seed: 7,
        }
    }

    #[test]
    fn round_trip_preserves_values_and_meta() {
        let config = EncoderConfig {
            embed_dim: 16,
            width: 16,
            depth: 1,
            heads: 2,
            patch_size: 8,
            vocab_size: 64,
            max_text_len: 8,
            image_size: 16,
        };
        let model: Model<f32> = Model::new(config.clone(), 11).unwrap();
        let path = tmpfile("roundtrip");
        save(&path, &model, &meta(config, false)).unwrap();
        let (back, m) = load::<f32>(&path).unwrap();
        assert_eq!(m.role, "student");
        assert_eq!(m.val_recall_at_1, Some(0.93));
        assert_eq!(back.store.checksum(), model.store.checksum());
        assert!(!back.is_frozen());
    }

    #[test]
    fn frozen_checkpoint_loads_untrainable() {
        let config = EncoderConfig {
            embed_dim: 8,
            width: 8,
            depth: 1,
            heads: 1,
            patch_size: 8,
            vocab_size: 32,
            max_text_len: 8,
            image_size: 8,
        };
        let mut model: Model<f32> = Model::new(config.clone(), 3).unwrap();
        model.freeze();
        let path = tmpfile("frozen");
        save(&path, &model, &meta(config, true)).unwrap();
        let (back, m) = load::<f32>(&path).unwrap();
        assert!(m.frozen);
        assert!(back.is_frozen());
    }

    #[test]
    fn saving_is_deterministic() {
        let config = EncoderConfig {
            embed_dim: 8,
            width: 8,
            depth: 1,
            heads: 1,
            patch_size: 8,
            vocab_size: 32,
            max_text_len: 8,
            image_size: 8,
        };
        let model: Model<f32> = Model::new(config.clone(), 5).unwrap();
        let (a, b) = (tmpfile("det-a"), tmpfile("det-b"));
        save(&a, &model, &meta(config.clone(), false)).unwrap();
        save(&b, &model, &meta(config, false)).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmpfile("magic");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        assert!(matches!(
            load::<f32>(&path).unwrap_err(),
            CheckpointError::BadMagic
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let config = EncoderConfig {
            embed_dim: 8,
            width: 8,
            depth: 1,
            heads: 1,
            patch_size: 8,
            vocab_size: 32,
            max_text_len: 8,
            image_size: 8,
        };
        let model: Model<f32> = Model::new(config.clone(), 5).unwrap();
        let path = tmpfile("trunc");
        save(&path, &model, &meta(config, false)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
