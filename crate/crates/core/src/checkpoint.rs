//! Self-describing checkpoint file.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CRMNCKPT"
//! version    u32      1
//! manifest   u32 length + UTF-8 JSON (model kind, NetworkConfig, dtype)
//! count      u32
//! tensor*    u16 name length, name, u8 dtype code, u8 rank,
//!            rank × u32 dims, product(dims) × dtype-size bytes
//! ```
//!
//! Tensors appear in parameter-store order, buffers included. Values are
//! stored in the model's own precision, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::ModelKind;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::resnet::NetworkConfig;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CRMNCKPT";
pub const VERSION: u32 = 1;

/// Upper bound on a single tensor's element count, so a corrupt header
/// cannot request an absurd allocation before the length check.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub config: NetworkConfig,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian values.
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_tensor<S: Scalar>(name: &str, t: &Tensor<S>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * S::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        NamedTensor {
            name: name.to_string(),
            dtype: S::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes in the stored precision, then converts to `S`.
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let data: Vec<S> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| S::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| S::from_f64_lossy(f64::read_le(c))).collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(kind: ModelKind, config: &NetworkConfig, store: &ParamStore<S>) -> Self {
        Checkpoint {
            manifest: CheckpointManifest {
                kind,
                config: config.clone(),
                dtype: format!("{:?}", S::DTYPE).to_lowercase(),
            },
            tensors: store.iter().map(|p| NamedTensor::from_tensor(&p.name, &p.value)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Input(format!("tensor {} cannot be encoded", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos as u64;
        let manifest: CheckpointManifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(at, format!("manifest: {e}")))?;
        manifest
            .config
            .validate()
            .map_err(|e| Error::format(at, format!("manifest: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.pos as u64;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown dtype code"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut elements = 1u64;
            for _ in 0..rank {
                let d = r.u32()?;
                elements = elements.saturating_mul(d as u64);
                shape.push(d as usize);
            }
            if elements > MAX_ELEMENTS {
                return Err(Error::format(r.pos as u64, format!("tensor {name} is implausibly large")));
            }
            let data = r.take(elements as usize * dtype.size())?.to_vec();
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Copies every tensor into the same-named parameter of `store`. The
    /// name sets must match exactly and shapes must agree.
    pub fn load_into<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Input(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store
                .find(&t.name)
                .ok_or_else(|| Error::Input(format!("checkpoint tensor {} not in model", t.name)))?;
            let value = t.to_tensor::<S>()?;
            if value.shape() != store.value(id).shape() {
                return Err(Error::dim("checkpoint", value.shape(), store.value(id).shape()));
            }
            *store.value_mut(id) = value;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, format!("need {n} bytes, file ends")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
