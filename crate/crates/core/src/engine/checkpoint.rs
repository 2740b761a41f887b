//! Binary checkpoint format.
//!
//! ```text
//! "UASAM1" | u64 LE header length | JSON header | f64 LE arrays
//! ```
//!
//! Arrays follow header order: every parameter, then for each optimizer
//! moment entry its first and second moment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"UASAM1";

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    frozen_prefixes: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    state: OptimizerState,
    moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub meta: serde_json::Value,
}

pub fn encode(
    store: &ParamStore,
    optimizer: Option<&OptimizerState>,
    meta: &serde_json::Value,
) -> Vec<u8> {
    let header = Header {
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                frozen: store.is_frozen(name),
            })
            .collect(),
        frozen_prefixes: store.frozen_prefixes().to_vec(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            state: o.clone(),
            moments: o.moments.keys().cloned().collect(),
        }),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header is always serialisable");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    let mut put = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, t) in store.iter() {
        put(t.data());
    }
    if let Some(o) = optimizer {
        for (m, v) in o.moments.values() {
            put(m);
            put(v);
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::Checkpoint { path: origin.to_string(), reason: reason.to_string() };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointVersion { path: origin.to_string() });
    }
    let mut pos = MAGIC.len();
    let len_bytes: [u8; 8] = bytes
        .get(pos..pos + 8)
        .ok_or_else(|| bad("truncated header length"))?
        .try_into()
        .expect("slice of 8");
    pos += 8;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header too large"))?;
    let header_bytes = bytes
        .get(pos..pos.checked_add(header_len).ok_or_else(|| bad("header too large"))?)
        .ok_or_else(|| bad("truncated header"))?;
    pos += header_len;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("invalid header: {e}")))?;

    let mut take = |n: usize| -> Result<Vec<f64>> {
        let end = pos.checked_add(n * 8).ok_or_else(|| bad("array too large"))?;
        let chunk = bytes.get(pos..end).ok_or_else(|| bad("truncated array data"))?;
        pos = end;
        Ok(chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    };

    let mut store = ParamStore::new();
    for entry in &header.params {
        let n = entry.shape.iter().product();
        let t = Tensor::new(entry.shape.clone(), take(n)?)?;
        store.insert(entry.name.clone(), t)?;
    }
    for p in &header.frozen_prefixes {
        store.freeze_prefix(p.clone());
    }
    if header.params.iter().any(|e| e.frozen != store.is_frozen(&e.name)) {
        return Err(bad("frozen flags disagree with frozen prefixes"));
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(OptimizerHeader { mut state, moments }) => {
            for name in moments {
                let n = store.get(&name).map_err(|_| bad(&format!("moment for unknown parameter {name}")))?.numel();
                let m = take(n)?;
                let v = take(n)?;
                state.moments.insert(name, (m, v));
            }
            Some(state)
        }
    };
    if pos != bytes.len() {
        return Err(bad("trailing bytes after arrays"));
    }
    Ok(Checkpoint { store, optimizer, meta: header.meta })
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    optimizer: Option<&OptimizerState>,
    meta: &serde_json::Value,
) -> Result<()> {
    std::fs::write(path, encode(store, optimizer, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
