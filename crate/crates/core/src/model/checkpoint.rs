//! Binary model container.
//!
//! Layout: the 8-byte magic `SEGXALCK`, a little-endian `u32` header length,
//! a JSON header `{schema, config, dtype, tensors: [{name, shape, offset}]}`
//! and finally the tensor payload as little-endian `f64`, offsets counted in
//! elements from the start of the payload.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Param, Scalar, UNet};
use crate::error::{Error, Result};
use crate::types::SCHEMA_VERSION;

const MAGIC: &[u8; 8] = b"SEGXALCK";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode<T: Scalar>(model: &UNet<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (name, p) in model.params() {
        tensors.push(TensorEntry {
            name: format!("{name}.weight"),
            shape: p.w.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend(p.w.iter().map(|v| v.as_f64()));
        tensors.push(TensorEntry {
            name: format!("{name}.bias"),
            shape: p.b.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend(p.b.iter().map(|v| v.as_f64()));
    }
    let header = serde_json::to_vec(&Header {
        schema: SCHEMA_VERSION.into(),
        config: model.config.clone(),
        dtype: "f64".into(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<UNet<T>> {
    let bad = |offset: usize, reason: &str| Error::CorruptInput {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad(0, "missing checkpoint magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend {
        return Err(bad(bytes.len(), "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..hend]).map_err(|e| bad(12 + e.column(), &e.to_string()))?;
    if header.schema != SCHEMA_VERSION {
        return Err(Error::Schema {
            expected: SCHEMA_VERSION.into(),
            found: header.schema,
        });
    }
    let payload = &bytes[hend..];
    let read = |entry: &TensorEntry| -> Result<Vec<T>> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(bad(hend + payload.len(), &format!("tensor {} truncated", entry.name)));
        }
        Ok(payload[start..end]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    };
    let mut model = UNet::<T>::new(header.config)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let find = |suffix: &str| {
            header
                .tensors
                .iter()
                .find(|t| t.name == format!("{name}.{suffix}"))
                .ok_or_else(|| bad(12, &format!("missing tensor {name}.{suffix}")))
        };
        let w = find("weight")?;
        let b = find("bias")?;
        if w.shape != p.w.shape() || b.shape != p.b.shape() {
            return Err(bad(12, &format!("tensor {name} has unexpected shape")));
        }
        *p = Param {
            w: Array2::from_shape_vec(p.w.dim(), read(w)?).expect("checked shape"),
            b: Array1::from_vec(read(b)?),
        };
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &UNet<T>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<UNet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
