//! Binary tensor container.
//!
//! Single tensor: `"RMFD1"`, dtype code (u8), rank (u8), `rank` × u32 shape,
//! row-major little-endian payload. Dtype codes: 0 = f32, 1 = i32, 2 = f64.
//!
//! Named bundle: `"RMFD1"`, code [`BUNDLE_CODE`], u32 header length, a JSON
//! header listing `{name, dtype, shape, offset, len}` per tensor (offsets
//! relative to the payload start), then the concatenated payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RMFD1";
pub const BUNDLE_CODE: u8 = 0xB0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::I32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: TensorData::F32(data) }
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: TensorData::I32(data) }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: TensorData::F64(data) }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values widened to f64 (integers converted exactly).
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.shape.len() + self.numel() * self.dtype().width());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(u8::try_from(self.shape.len()).expect("rank fits in u8"));
        for &s in &self.shape {
            out.extend_from_slice(&u32::try_from(s).expect("dimension fits in u32").to_le_bytes());
        }
        out.extend_from_slice(&self.payload());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 7 || &bytes[..5] != MAGIC {
            return Err("bad magic".into());
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| format!("unknown dtype code {}", bytes[5]))?;
        let rank = bytes[6] as usize;
        let mut pos = 7;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = bytes.get(pos..pos + 4).ok_or("truncated shape")?;
            shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let payload = &bytes[pos..];
        if payload.len() != n * dtype.width() {
            return Err(format!("payload has {} bytes, shape {:?} needs {}", payload.len(), shape, n * dtype.width()));
        }
        Ok(Self { shape, data: decode_payload(dtype, payload) })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::Container { path: path.to_path_buf(), msg })
    }
}

fn decode_payload(dtype: DType, payload: &[u8]) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
        DType::I32 => TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
        DType::F64 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct BundleEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Encodes named tensors in the given order.
pub fn encode_bundle(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes = t.payload();
        entries.push(BundleEntry { name: name.clone(), dtype: t.dtype(), shape: t.shape.clone(), offset: payload.len(), len: bytes.len() });
        payload.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&entries).expect("bundle header serializes");
    let mut out = Vec::with_capacity(10 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(BUNDLE_CODE);
    out.extend_from_slice(&u32::try_from(header.len()).expect("header fits in u32").to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_bundle(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < 10 || &bytes[..5] != MAGIC || bytes[5] != BUNDLE_CODE {
        return Err("not a tensor bundle".into());
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let header = bytes.get(10..10 + hlen).ok_or("truncated header")?;
    let entries: Vec<BundleEntry> = serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
    let payload = &bytes[10 + hlen..];
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        if e.len != n * e.dtype.width() {
            return Err(format!("{}: length {} does not match shape {:?}", e.name, e.len, e.shape));
        }
        let chunk = payload.get(e.offset..e.offset + e.len).ok_or_else(|| format!("{}: payload out of range", e.name))?;
        out.push((e.name, Tensor { shape: e.shape, data: decode_payload(e.dtype, chunk) }));
    }
    Ok(out)
}

pub fn write_bundle(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_bundle(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes).map_err(|msg| Error::Container { path: path.to_path_buf(), msg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::i32(vec![2], vec![1, -1]);
        let b = t.encode();
        assert_eq!(&b[..5], b"RMFD1");
        assert_eq!(b[5], 1);
        assert_eq!(b[6], 1);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..], &[1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut b = Tensor::f32(vec![3], vec![1.0, 2.0, 3.0]).encode();
        b.pop();
        assert!(Tensor::decode(&b).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let ts = vec![("a".to_string(), Tensor::f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.5])), ("b".to_string(), Tensor::i32(vec![], vec![7]))];
        assert_eq!(decode_bundle(&encode_bundle(&ts)).unwrap(), ts);
    }

    proptest! {
        #[test]
        fn f32_round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::f32(shape, data);
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }
}
