//! Self-describing network checkpoint.
//!
//! Layout: the 8-byte magic `PTSKCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f64` payload. The header lists every layer spec and, for
//! each stored array, its role, shape and element offset into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{BnStats, Layer, LayerSpec};
use super::network::{Mode, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PTSKCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    mode: Mode,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    spec: LayerSpec,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    role: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut payload: Vec<f64> = Vec::new();
    let mut layers = Vec::new();
    let mut push = |role: &str, shape: &[usize], data: &[f64], arrays: &mut Vec<ArrayEntry>| {
        arrays.push(ArrayEntry {
            role: role.into(),
            shape: shape.to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(data);
    };
    for l in net.layers() {
        let mut arrays = Vec::new();
        if let Some(w) = &l.weight {
            push("weight", w.shape(), w.data(), &mut arrays);
        }
        if let Some(b) = &l.bias {
            push("bias", b.shape(), b.data(), &mut arrays);
        }
        if let Some(s) = &l.stats {
            push("running_mean", &[s.mean.len()], &s.mean, &mut arrays);
            push("running_var", &[s.var.len()], &s.var, &mut arrays);
        }
        layers.push(LayerEntry {
            spec: l.spec.clone(),
            arrays,
        });
    }
    let header = serde_json::to_vec(&Header {
        input_shape: net.input_shape().to_vec(),
        mode: net.mode(),
        layers,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let bad = |d: &str| Error::format("checkpoint", d);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let raw = &body[hlen..];
    if raw.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64"));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in header.layers {
        let mut layer = Layer {
            spec: entry.spec,
            weight: None,
            bias: None,
            stats: None,
        };
        let mut mean = None;
        let mut var = None;
        for a in entry.arrays {
            let n: usize = a.shape.iter().product();
            let data = payload
                .get(a.offset..a.offset + n)
                .ok_or_else(|| bad("array extends past payload"))?
                .to_vec();
            match a.role.as_str() {
                "weight" => layer.weight = Some(Tensor::new(a.shape, data)?),
                "bias" => layer.bias = Some(Tensor::new(a.shape, data)?),
                "running_mean" => mean = Some(data),
                "running_var" => var = Some(data),
                other => return Err(bad(&format!("unknown array role `{other}`"))),
            }
        }
        if let (Some(mean), Some(var)) = (mean, var) {
            layer.stats = Some(BnStats { mean, var });
        }
        layers.push(layer);
    }
    Network::from_layers(header.input_shape, layers, header.mode)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
