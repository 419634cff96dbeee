//! Binary checkpoint format:
//! `"DRTC" | version u32 | header_len u64 | header JSON | payload`,
//! all integers and values little-endian. Offsets in the header are
//! relative to the payload start and must be contiguous.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RoutedLm};
use crate::numerics::{Scalar, Tensor};
use crate::training::{OptState, TrainConfig};

pub const MAGIC: [u8; 4] = *b"DRTC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    /// Optimizer step counter; present iff optimizer tensors are stored.
    pub opt_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn dtype(&self) -> Option<&str> {
        self.tensors.first().map(|t| t.dtype.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: RoutedLm<T>,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub opt: Option<OptState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: RoutedLm<T>) -> Self {
        Self {
            model,
            train_config: None,
            step: 0,
            opt: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.model, self.train_config.as_ref(), self.step, self.opt.as_ref())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Loads a checkpoint, converting values if it was written at another
    /// precision.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn encode<T: Scalar>(
    model: &RoutedLm<T>,
    train_config: Option<&TrainConfig>,
    step: u64,
    opt: Option<&OptState<T>>,
) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor<T>)> = model.named_params();
    if let Some(o) = opt {
        if o.m.len() != named.len() || o.v.len() != named.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        for (n, m) in names.iter().zip(&o.m) {
            named.push((format!("opt.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&o.v) {
            named.push((format!("opt.v.{n}"), v));
        }
    }
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(named.len());
    for (name, t) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
        });
        offset += (t.numel() * T::BYTES) as u64;
    }
    let header = CheckpointHeader {
        model_config: model.config.clone(),
        train_config: train_config.cloned(),
        step,
        opt_step: opt.map(|o| o.t),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses and validates the preamble and header, returning the header and
/// the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Integrity(format!("file of {} bytes is too short", bytes.len())));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::Format {
            expected: MAGIC,
            found,
        });
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Integrity("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Integrity(format!("header length {header_len} exceeds file size")))?
        as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;
    let payload = &bytes[header_end..];
    let mut expected = 0u64;
    for e in &header.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4u64,
            "f64" => 8u64,
            other => return Err(Error::Integrity(format!("tensor `{}` has unknown dtype `{other}`", e.name))),
        };
        if e.offset != expected {
            return Err(Error::Integrity(format!(
                "tensor `{}` declared at offset {} but expected {expected}",
                e.name, e.offset
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Integrity(format!("tensor `{}` shape overflows", e.name)))?;
        expected = numel
            .checked_mul(width)
            .and_then(|b| b.checked_add(expected))
            .ok_or_else(|| Error::Integrity(format!("tensor `{}` size overflows", e.name)))?;
        if expected > payload.len() as u64 {
            return Err(Error::Integrity(format!(
                "tensor `{}` ends at byte {expected} but the payload has {} bytes",
                e.name,
                payload.len()
            )));
        }
    }
    if expected != payload.len() as u64 {
        return Err(Error::Integrity(format!(
            "payload has {} bytes but the index accounts for {expected}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

fn read_values<S: Scalar>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<S>> {
    let data = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
    Tensor::new(shape.to_vec(), data)
}

fn read_tensor<T: Scalar>(payload: &[u8], e: &TensorEntry) -> Result<Tensor<T>> {
    let numel: usize = e.shape.iter().product();
    let start = e.offset as usize;
    match e.dtype.as_str() {
        "f32" => Ok(read_values::<f32>(&payload[start..start + numel * 4], &e.shape)?.cast()),
        "f64" => Ok(read_values::<f64>(&payload[start..start + numel * 8], &e.shape)?.cast()),
        other => Err(Error::Integrity(format!("unknown dtype `{other}`"))),
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = read_header(bytes)?;
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in &header.tensors {
        let t = read_tensor::<T>(payload, e)?;
        let slot = if let Some(n) = e.name.strip_prefix("opt.m.") {
            m.insert(n.to_string(), t)
        } else if let Some(n) = e.name.strip_prefix("opt.v.") {
            v.insert(n.to_string(), t)
        } else {
            params.insert(e.name.clone(), t)
        };
        if slot.is_some() {
            return Err(Error::Integrity(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let model = RoutedLm::from_named(&header.model_config, params)?;
    let opt = match header.opt_step {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Integrity("optimizer tensors without opt_step".into())),
        Some(t) => {
            let mut state = OptState {
                m: Vec::new(),
                v: Vec::new(),
                t,
            };
            for (name, p) in model.named_params() {
                let (mi, vi) = match (m.remove(&name), v.remove(&name)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Integrity(format!("missing optimizer state for `{name}`"))),
                };
                if mi.shape() != p.shape() || vi.shape() != p.shape() {
                    return Err(Error::Integrity(format!("optimizer state for `{name}` has the wrong shape")));
                }
                state.m.push(mi);
                state.v.push(vi);
            }
            if let Some(extra) = m.keys().chain(v.keys()).next() {
                return Err(Error::Integrity(format!("optimizer state for unknown tensor `{extra}`")));
            }
            Some(state)
        }
    };
    Ok(Checkpoint {
        model,
        train_config: header.train_config,
        step: header.step,
        opt,
    })
}

/// Reads only the header of a checkpoint file.
pub fn inspect(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    Ok(read_header(&bytes)?.0)
}
