//! Dense `f32` tensors, per-layer weight storage and their binary file
//! formats.
//!
//! Tensor files start with the magic `TNSR`, followed by a little-endian
//! `u32` version, `u32` rank, one `u32` per dimension and the row-major
//! little-endian `f32` data. Weight-store files start with `WSTR`, a version
//! and an entry count, then per entry a `u32` name length, the UTF-8 name
//! `"layer/tensor"`, and the tensor body (rank, dims, data).

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::graph::TensorShape;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"WSTR";
pub const FORMAT_VERSION: u32 = 1;

// Guards against absurd allocations from corrupt headers.
const MAX_RANK: u32 = 8;
const MAX_NAME_LEN: u32 = 4096;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match dims {dims:?}")]
    Length { dims: Vec<usize>, len: usize },
    #[error("expected a rank-4 tensor, got dims {0:?}")]
    NotRank4(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unsupported tensor rank {0}")]
    Rank(u32),
    #[error("weight entry name is not valid UTF-8")]
    Utf8,
    #[error("weight entry name `{0}` is not of the form `layer/tensor`")]
    BadName(String),
    #[error("weight entry name of length {0} exceeds the limit")]
    NameTooLong(u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major dense tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length { dims, len: data.len() });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![0.0; dims.iter().product()] }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    pub fn from_shape(shape: TensorShape, data: Vec<f32>) -> Result<Self, TensorError> {
        Tensor::new(shape.dims().to_vec(), data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as an activation `(n, c, h, w)`.
    pub fn shape4(&self) -> Result<TensorShape, TensorError> {
        match self.dims[..] {
            [n, c, h, w] => Ok(TensorShape { n, c, h, w }),
            _ => Err(TensorError::NotRank4(self.dims.clone())),
        }
    }

    /// Number of elements in one slice along the leading axis.
    pub fn row_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    /// Keeps only the listed indices along axis `axis`.
    pub fn select(&self, axis: usize, keep: &[usize]) -> Tensor {
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let axis_len = self.dims[axis];
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * axis_len + k) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut dims = self.dims.clone();
        dims[axis] = keep.len();
        Tensor { dims, data }
    }

    /// Largest absolute element-wise difference; `None` when dims differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.dims != other.dims {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        self.write_body(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor, FormatError> {
        expect_magic(r, TENSOR_MAGIC)?;
        expect_version(r)?;
        Tensor::read_body(r)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write_body(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    fn read_body(r: &mut impl Read) -> Result<Tensor, FormatError> {
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(FormatError::Rank(rank));
        }
        let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let mut bytes = Vec::new();
        r.take(4 * count as u64).read_to_end(&mut bytes)?;
        if bytes.len() != 4 * count {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated tensor data").into());
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::new(dims, data)?)
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<(), FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(FormatError::BadMagic { expected: String::from_utf8_lossy(magic).into_owned() });
    }
    Ok(())
}

fn expect_version(r: &mut impl Read) -> Result<(), FormatError> {
    match read_u32(r)? {
        FORMAT_VERSION => Ok(()),
        v => Err(FormatError::Version(v)),
    }
}

/// Named parameter tensors per layer id. Conv layers hold `weight`
/// `[out, in/groups, kh, kw]` and optionally `bias` `[out]`; batch-norm
/// layers hold `mean`, `variance`, `gamma` and `beta`, each `[c]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&Tensor> {
        self.entries.get(layer)?.get(name)
    }

    pub fn get_mut(&mut self, layer: &str, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(layer)?.get_mut(name)
    }

    pub fn layer(&self, layer: &str) -> Option<&BTreeMap<String, Tensor>> {
        self.entries.get(layer)
    }

    pub fn insert(&mut self, layer: &str, name: &str, tensor: Tensor) {
        self.entries.entry(layer.to_string()).or_default().insert(name.to_string(), tensor);
    }

    pub fn remove(&mut self, layer: &str, name: &str) -> Option<Tensor> {
        let map = self.entries.get_mut(layer)?;
        let t = map.remove(name);
        if map.is_empty() {
            self.entries.remove(layer);
        }
        t
    }

    pub fn remove_layer(&mut self, layer: &str) -> Option<BTreeMap<String, Tensor>> {
        self.entries.remove(layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// All `(layer, name, tensor)` triples in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.entries
            .iter()
            .flat_map(|(l, m)| m.iter().map(move |(n, t)| (l.as_str(), n.as_str(), t)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let count = self.iter().count() as u32;
        w.write_all(&count.to_le_bytes())?;
        for (layer, name, t) in self.iter() {
            let full = format!("{layer}/{name}");
            w.write_all(&(full.len() as u32).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            t.write_body(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<WeightStore, FormatError> {
        expect_magic(r, WEIGHTS_MAGIC)?;
        expect_version(r)?;
        let count = read_u32(r)?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = read_u32(r)?;
            if len > MAX_NAME_LEN {
                return Err(FormatError::NameTooLong(len));
            }
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| FormatError::Utf8)?;
            // Layer ids may not contain '/', so the last separator splits.
            let (layer, tensor) = name
                .rsplit_once('/')
                .filter(|(l, t)| !l.is_empty() && !t.is_empty())
                .ok_or_else(|| FormatError::BadName(name.clone()))?;
            let t = Tensor::read_body(r)?;
            store.insert(layer, tensor, t);
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
        assert_eq!(Tensor::read_from(&mut &bytes[..]).unwrap(), t);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let bytes = Tensor::zeros(&[2, 2]).to_bytes();
        assert!(Tensor::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut &bad[..]), Err(FormatError::BadMagic { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Tensor::read_from(&mut &v2[..]), Err(FormatError::Version(2))));
    }

    #[test]
    fn weight_store_round_trip() {
        let mut ws = WeightStore::new();
        ws.insert("conv1", "weight", Tensor::full(&[2, 1, 1, 1], 0.5));
        ws.insert("conv1", "bias", Tensor::zeros(&[2]));
        ws.insert("bn", "gamma", Tensor::full(&[2], 1.0));
        let bytes = ws.to_bytes();
        assert_eq!(&bytes[..4], b"WSTR");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(WeightStore::read_from(&mut &bytes[..]).unwrap(), ws);
    }

    #[test]
    fn select_along_axis() {
        let t = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.select(0, &[0, 2]).data(), &[0., 1., 4., 5.]);
        assert_eq!(t.select(1, &[1]).data(), &[1., 3., 5.]);
    }
}
