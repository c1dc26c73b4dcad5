//! Mask export: `masks.bin` holds each layer's mask bit-packed (LSB first,
//! every layer starting on a byte boundary); `masks.json` indexes it by
//! layer name, shape, nnz and byte offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::SparseMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MASK_BIN: &str = "masks.bin";
pub const MASK_INDEX: &str = "masks.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub layer: String,
    pub shape: Vec<usize>,
    pub nnz: usize,
    pub offset: usize,
    pub bytes: usize,
}

pub fn pack_bits(mask: &Tensor) -> Vec<u8> {
    let mut out = vec![0u8; mask.numel().div_ceil(8)];
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::format("mask bits", format!("{} bytes for {n} entries", bytes.len())));
    }
    let data = (0..n).map(|i| f64::from((bytes[i / 8] >> (i % 8)) & 1)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn export_masks(masks: &SparseMask, names: &[String], dir: &Path) -> Result<()> {
    let mut bin = Vec::new();
    let mut index = Vec::new();
    for (m, name) in masks.layers().iter().zip(names) {
        let bits = pack_bits(m);
        index.push(MaskIndexEntry {
            layer: name.clone(),
            shape: m.shape().to_vec(),
            nnz: m.data().iter().filter(|&&v| v != 0.0).count(),
            offset: bin.len(),
            bytes: bits.len(),
        });
        bin.extend(bits);
    }
    let p = dir.join(MASK_BIN);
    fs::write(&p, bin).map_err(|e| Error::io(p, e))?;
    let p = dir.join(MASK_INDEX);
    fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(p, e))
}

pub fn import_masks(dir: &Path) -> Result<(SparseMask, Vec<MaskIndexEntry>)> {
    let p = dir.join(MASK_INDEX);
    let index: Vec<MaskIndexEntry> = serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(p, e))?)?;
    let p = dir.join(MASK_BIN);
    let bin = fs::read(&p).map_err(|e| Error::io(p, e))?;
    let mut layers = Vec::with_capacity(index.len());
    for e in &index {
        let bytes = bin
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::format("mask bits", format!("{} extends past file", e.layer)))?;
        let t = unpack_bits(bytes, &e.shape)?;
        let nnz = t.data().iter().filter(|&&v| v != 0.0).count();
        if nnz != e.nnz {
            return Err(Error::format("mask index", format!("{}: nnz {nnz} != indexed {}", e.layer, e.nnz)));
        }
        layers.push(t);
    }
    Ok((SparseMask::new(layers)?, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_import() {
        let dir = tempfile::tempdir().unwrap();
        let masks = SparseMask::new(vec![
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![0.0; 17]),
        ])
        .unwrap();
        export_masks(&masks, &["a".into(), "b".into()], dir.path()).unwrap();
        let (back, index) = import_masks(dir.path()).unwrap();
        assert_eq!(back, masks);
        assert_eq!(index[0].nnz, 5);
        assert_eq!(index[1].offset, 2);
        assert_eq!(index[1].bytes, 3);
    }
}
