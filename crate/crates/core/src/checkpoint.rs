//! Checkpoint file format.
//!
//! ```text
//! "CLABCKPT"            8 bytes
//! header length         u64, little endian
//! header                JSON (see [`Header`])
//! payload               raw little-endian floats
//! ```
//!
//! Every tensor entry names its shape, dtype, byte offset and byte length
//! within the payload. Offsets are contiguous in manifest order and cover
//! the payload exactly; loading rejects anything else.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Moments, OptimizerState, Tensor};
use crate::params::{ParamStore, Provenance};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CLABCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
    pub frozen: bool,
    pub provenance: Provenance,
}

/// Where a training run stopped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub stage: u8,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub progress: Option<Progress>,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Names of parameters frozen for the run that wrote the file.
    pub frozen: Vec<String>,
    pub optimizer: Option<OptimizerState<T>>,
    pub progress: Option<Progress>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, frozen: impl Fn(&str) -> bool) -> Self {
        let frozen = model.params.iter().filter(|p| frozen(&p.name)).map(|p| p.name.clone()).collect();
        Self {
            model,
            frozen,
            optimizer: None,
            progress: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, kind, shape: &[usize], data: &[T], frozen, provenance| {
            let offset = payload.len() as u64;
            for &v in data {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: shape.to_vec(),
                dtype: T::DTYPE.to_string(),
                offset,
                len: payload.len() as u64 - offset,
                frozen,
                provenance,
            });
        };
        for p in self.model.params.iter() {
            let frozen = self.frozen.iter().any(|n| n == &p.name);
            push(&p.name, EntryKind::Param, p.value.shape(), p.value.data(), frozen, p.provenance);
        }
        if let Some(opt) = &self.optimizer {
            for (name, m) in opt.iter_moments() {
                let p = self.model.params.iter().find(|p| p.name == name).expect("moments of a known parameter");
                push(name, EntryKind::AdamM, p.value.shape(), &m.m, false, p.provenance);
                push(name, EntryKind::AdamV, p.value.shape(), &m.v, false, p.provenance);
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.config.clone(),
            progress: self.progress.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config.clone(),
                step: o.step_count(),
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header = read_header(&body[..hlen])?;
        let payload = &body[hlen..];
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.version)));
        }
        let mut expected = 0u64;
        for e in &header.tensors {
            if e.dtype != T::DTYPE {
                return Err(bad(format!("{}: dtype {} but loading as {}", e.name, e.dtype, T::DTYPE)));
            }
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(bad(format!("{}: offset {} but expected {expected}", e.name, e.offset)));
            }
            if e.len != (n * T::BYTES) as u64 {
                return Err(bad(format!("{}: byte length {} does not match shape {:?}", e.name, e.len, e.shape)));
            }
            expected += e.len;
        }
        if expected != payload.len() as u64 {
            return Err(bad(format!("manifest covers {expected} bytes, payload has {}", payload.len())));
        }
        let reference = Model::<T>::new(header.model.clone()).map_err(|e| bad(format!("model config: {e}")))?;
        let mut store = ParamStore::new();
        let mut frozen = Vec::new();
        let mut moments: BTreeMap<String, Moments<T>> = BTreeMap::new();
        for e in &header.tensors {
            let start = e.offset as usize;
            let data: Vec<T> = payload[start..start + e.len as usize].chunks_exact(T::BYTES).map(T::read_le).collect();
            let want = reference
                .params
                .get(&e.name)
                .map_err(|_| bad(format!("unknown parameter {}", e.name)))?;
            if want.shape() != e.shape.as_slice() {
                return Err(bad(format!("{}: shape {:?} but model expects {:?}", e.name, e.shape, want.shape())));
            }
            match e.kind {
                EntryKind::Param => {
                    if store.contains(&e.name) {
                        return Err(bad(format!("duplicate parameter {}", e.name)));
                    }
                    store.insert(&e.name, Tensor::new(&e.shape, data)?, e.provenance);
                    if e.frozen {
                        frozen.push(e.name.clone());
                    }
                }
                EntryKind::AdamM => moments.entry(e.name.clone()).or_insert_with(empty_moments).m = data,
                EntryKind::AdamV => moments.entry(e.name.clone()).or_insert_with(empty_moments).v = data,
            }
        }
        if store.len() != reference.params.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters, model expects {}",
                store.len(),
                reference.params.len()
            )));
        }
        // Keep the model's canonical parameter order.
        let mut ordered = ParamStore::new();
        for p in reference.params.iter() {
            let q = store.get_mut(&p.name).expect("all names checked");
            ordered.insert(&p.name, q.value.clone(), q.provenance);
        }
        let optimizer = match header.optimizer {
            Some(meta) => {
                for (n, m) in &moments {
                    if m.m.is_empty() || m.m.len() != m.v.len() {
                        return Err(bad(format!("incomplete optimizer moments for {n}")));
                    }
                }
                Some(OptimizerState::restore(meta.config, meta.step, moments))
            }
            None if moments.is_empty() => None,
            None => return Err(bad("optimizer moments without optimizer metadata".into())),
        };
        Ok(Self {
            model: Model {
                config: header.model,
                params: ordered,
            },
            frozen,
            optimizer,
            progress: header.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save leaves the old file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn empty_moments<T>() -> Moments<T> {
    Moments { m: Vec::new(), v: Vec::new() }
}

/// Parses only the header of a checkpoint.
pub fn read_header(json: &[u8]) -> Result<Header> {
    serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))
}

/// Splits a checkpoint into `(header, payload)` without decoding tensors.
pub fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    Ok((read_header(&bytes[16..16 + hlen])?, &bytes[16 + hlen..]))
}

/// Reassembles a checkpoint from a header and payload.
pub fn join(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}
