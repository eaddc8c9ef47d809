//! Named-tensor checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RTCK" | version=1 | tensor count
//! per tensor: name length | name bytes (UTF-8) | ndim | extents... | f32 LE data
//! ```
//!
//! Scalars are always stored as `f32`; `f64` models are rounded on save.
//! The model configuration travels as the first tensor, `meta.config`,
//! whose values are the structural fields listed in [`META_FIELDS`].

use std::fs;
use std::path::Path;

use crate::config::{Activation, ChunkMaskSpec, EncoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RTCK";
pub const VERSION: u32 = 1;
pub const META_NAME: &str = "meta.config";
pub const META_FIELDS: [&str; 14] = [
    "vocab",
    "layers",
    "share_every",
    "rank",
    "d_model",
    "d_ff",
    "heads",
    "diag",
    "unique_last_layer",
    "activation",
    "dropout",
    "mask_chunk",
    "mask_history",
    "mask_lookahead",
];

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &Model<S>) -> Self {
        let mut tensors = vec![meta_tensor(model.config())];
        for (name, p) in model.params() {
            tensors.push(StoredTensor {
                name,
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
            });
        }
        Self { tensors }
    }

    /// Model tensors, excluding the configuration entry.
    pub fn weights(&self) -> impl Iterator<Item = &StoredTensor> {
        self.tensors.iter().filter(|t| t.name != META_NAME)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let meta = self
            .tensors
            .iter()
            .find(|t| t.name == META_NAME)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing {META_NAME}")))?;
        if meta.data.len() != META_FIELDS.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{META_NAME} has {} fields, expected {}",
                meta.data.len(),
                META_FIELDS.len()
            )));
        }
        let u = |i: usize| -> Result<usize> {
            let v = meta.data[i];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::CheckpointMismatch(format!("{} = {v} is not a count", META_FIELDS[i])));
            }
            Ok(v as usize)
        };
        let activation = Activation::from_code(u(9)? as u32)
            .ok_or_else(|| Error::CheckpointMismatch("unknown activation code".into()))?;
        let mask = match u(11)? {
            0 => None,
            chunk => Some(ChunkMaskSpec::new(chunk, u(12)?, u(13)?)?),
        };
        let encoder = EncoderConfig {
            layers: u(1)?,
            share_every: u(2)?,
            rank: u(3)?,
            d_model: u(4)?,
            d_ff: u(5)?,
            heads: u(6)?,
            diag: u(7)? != 0,
            unique_last_layer: u(8)? != 0,
            mask,
            activation,
            dropout: f64::from(meta.data[10]),
            seed: 0,
        };
        let config = ModelConfig::new(encoder, u(0)?);
        config.validate()?;
        Ok(config)
    }

    /// Rebuilds a model, checking every name and shape.
    pub fn to_model<S: Scalar>(&self) -> Result<Model<S>> {
        let config = self.model_config()?;
        let mut model = Model::<S>::new(&config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.tensor.shape().to_vec()))
            .collect();
        let stored: Vec<&StoredTensor> = self.weights().collect();
        if stored.len() != expected.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                stored.len()
            )));
        }
        let mut values = Vec::with_capacity(stored.len());
        for ((name, shape), t) in expected.iter().zip(stored) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
            let data = t.data.iter().map(|&v| S::from_f64_lossy(f64::from(v))).collect();
            values.push(Tensor::new(&t.shape, data)?);
        }
        model.load_tensors(values)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::CorruptHeader(format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::CorruptHeader(format!("tensor {i} name is not UTF-8")))?;
            let ndim = r.u32("ndim")? as usize;
            if ndim == 0 {
                return Err(Error::CorruptHeader(format!("tensor {name} has ndim 0")));
            }
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32("extent")? as usize);
            }
            if shape.contains(&0) {
                return Err(Error::CorruptHeader(format!("tensor {name} has a zero extent")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptHeader(format!("tensor {name} extents overflow")))?;
            let raw = r.take(numel.saturating_mul(4), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

/// Loads a model; with `expected`, also rejects structural differences.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model<S>> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(want) = expected {
        let fields = ckpt.model_config()?.structural_diff(want);
        if !fields.is_empty() {
            return Err(Error::ConfigMismatch { fields });
        }
    }
    ckpt.to_model()
}

fn meta_tensor(config: &ModelConfig) -> StoredTensor {
    let e = &config.encoder;
    let (chunk, history, lookahead) = e.mask.map_or((0, 0, 0), |m| (m.chunk, m.history, m.lookahead));
    let data = [
        config.vocab as f32,
        e.layers as f32,
        e.share_every as f32,
        e.rank as f32,
        e.d_model as f32,
        e.d_ff as f32,
        e.heads as f32,
        u8::from(e.diag) as f32,
        u8::from(e.unique_last_layer) as f32,
        e.activation.code() as f32,
        e.dropout as f32,
        chunk as f32,
        history as f32,
        lookahead as f32,
    ];
    StoredTensor {
        name: META_NAME.to_string(),
        shape: vec![data.len()],
        data: data.to_vec(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::new(&ModelConfig::new(EncoderConfig::tiny(), 5)).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_model(&tiny()).to_bytes();
        assert_eq!(&bytes[..4], b"RTCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(n, tiny().params().len() + 1);
    }

    #[test]
    fn truncation_is_reported_as_truncated() {
        let bytes = Checkpoint::from_model(&tiny()).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
    }

    #[test]
    fn corrupt_magic_and_version() {
        let mut bytes = Checkpoint::from_model(&tiny()).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptHeader(_))));
        bytes[0] = b'R';
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Checkpoint::from_model(&tiny()).to_bytes();
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn config_survives() {
        let mut cfg = ModelConfig::new(EncoderConfig::tiny().with_sharing(3), 5);
        cfg.encoder.mask = Some(ChunkMaskSpec::new(4, 7, 4).unwrap());
        cfg.encoder.activation = Activation::Gelu;
        let m = Model::<f64>::new(&cfg).unwrap();
        let back = Checkpoint::from_model(&m).model_config().unwrap();
        assert!(back.structural_diff(&cfg).is_empty());
        assert_eq!(back.encoder.mask, cfg.encoder.mask);
    }
}
