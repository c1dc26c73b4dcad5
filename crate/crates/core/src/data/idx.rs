//! IDX files: two zero bytes, a type code, the number of dimensions, then
//! one big-endian `u32` per dimension, followed by the big-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl IdxData {
    fn type_code(&self) -> u8 {
        match self {
            IdxData::U8(_) => 0x08,
            IdxData::I8(_) => 0x09,
            IdxData::I16(_) => 0x0B,
            IdxData::I32(_) => 0x0C,
            IdxData::F32(_) => 0x0D,
            IdxData::F64(_) => 0x0E,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::I8(v) => v.len(),
            IdxData::I16(v) => v.len(),
            IdxData::I32(v) => v.len(),
            IdxData::F32(v) => v.len(),
            IdxData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            IdxData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::I8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::I16(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

pub fn decode(bytes: &[u8]) -> Result<IdxArray> {
    let bad = |d: String| Error::format("IDX header", d);
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("magic must start with two zero bytes".into()));
    }
    let code = bytes[2];
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(bad("zero dimensions".into()));
    }
    let head = 4 + 4 * ndims;
    if bytes.len() < head {
        return Err(bad("truncated dimension list".into()));
    }
    let dims: Vec<usize> = bytes[4..head]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let width = match code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(bad(format!("unknown type code {other:#04x}"))),
    };
    let body = &bytes[head..];
    if body.len() != n * width {
        return Err(bad(format!("dims {dims:?} need {} payload bytes, found {}", n * width, body.len())));
    }
    let data = match code {
        0x08 => IdxData::U8(body.to_vec()),
        0x09 => IdxData::I8(body.iter().map(|&b| b as i8).collect()),
        0x0B => IdxData::I16(body.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]])).collect()),
        0x0C => IdxData::I32(body.chunks_exact(4).map(|c| i32::from_be_bytes(c.try_into().unwrap())).collect()),
        0x0D => IdxData::F32(body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect()),
        _ => IdxData::F64(body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(IdxArray { dims, data })
}

pub fn encode(arr: &IdxArray) -> Result<Vec<u8>> {
    let n: usize = arr.dims.iter().product();
    if n != arr.data.len() || arr.dims.is_empty() || arr.dims.len() > 255 {
        return Err(Error::Shape(format!("IDX dims {:?} for {} values", arr.dims, arr.data.len())));
    }
    let mut out = vec![0, 0, arr.data.type_code(), arr.dims.len() as u8];
    for &d in &arr.dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("IDX dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    match &arr.data {
        IdxData::U8(v) => out.extend_from_slice(v),
        IdxData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        IdxData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        IdxData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<IdxArray> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode(arr)?).map_err(|e| Error::io(path, e))
}
