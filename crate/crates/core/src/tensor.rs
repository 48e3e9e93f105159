//! Dense row-major tensors and the flat binary record format used for
//! checkpoints and diagnostic dumps.
//!
//! Record layout (all integers little-endian `u64`, values little-endian `f64`):
//!
//! ```text
//! name_len | name bytes | rank | extent_0 .. extent_{rank-1} | values
//! ```
//!
//! A file is a plain concatenation of records.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same values, new extents. The element count must not change.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Size of the trailing (channel) axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A named tensor as stored in a checkpoint or dump file.
pub type NamedTensor = (String, Tensor);

pub fn write_record<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_records<'a, I>(records: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut buf = Vec::new();
    for (name, t) in records {
        write_record(&mut buf, name, t).expect("writing to a Vec cannot fail");
    }
    buf
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let end = *pos + 8;
    let chunk = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::Checkpoint(format!("truncated record at byte {}", *pos)))?;
    *pos = end;
    Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let name_len = read_u64(bytes, &mut pos)? as usize;
        let name_bytes = bytes
            .get(pos..pos + name_len)
            .ok_or_else(|| Error::Checkpoint(format!("truncated name at byte {pos}")))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("name at byte {pos} is not utf-8")))?;
        pos += name_len;
        let rank = read_u64(bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(bytes, &mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(read_u64(bytes, &mut pos)?));
        }
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save_records<'a, I>(path: &std::path::Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let bytes = encode_records(records);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &std::path::Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}
