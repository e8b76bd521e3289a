//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u32 | config_len u64 | config (canonical JSON)
//! then until EOF, per tensor:
//!   name_len u32 | name | rank u32 | dims u64 × rank | f64 × prod(dims), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{EditError, Result};
use crate::model::{is_vector_tensor, Model, ModelConfig, Weights};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"HEDT";
pub const HYPER_MAGIC: &[u8; 4] = b"HHYP";

/// A named tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn from_matrix(name: &str, m: &DMatrix<f64>, as_vector: bool) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        let dims = if as_vector { vec![r * c] } else { vec![r, c] };
        Self { name: name.to_string(), dims, data }
    }

    pub fn from_slice(name: &str, v: &[f64]) -> Self {
        Self { name: name.to_string(), dims: vec![v.len()], data: v.to_vec() }
    }

    /// Vectors become `n × 1` matrices.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims.as_slice() {
            [n] => Ok(DMatrix::from_column_slice(*n, 1, &self.data)),
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            d => Err(EditError::Format(format!("tensor {} has unsupported rank {}", self.name, d.len()))),
        }
    }
}

/// Serializes `value` as JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn write_container<W: Write>(mut w: W, magic: &[u8; 4], config_json: &str, tensors: &[TensorEntry]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(EditError::Format(format!("tensor {} dims disagree with data length", t.name)));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(EditError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses a container, returning the config JSON and tensors.
pub fn read_container<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<(String, Vec<TensorEntry>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let m = c.take(4)?;
    if m != magic {
        return Err(EditError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(EditError::Format(format!("unsupported format version {version}")));
    }
    let len = c.u64()? as usize;
    let config = std::str::from_utf8(c.take(len)?)
        .map_err(|_| EditError::Format("config is not utf-8".into()))?
        .to_string();
    let mut tensors = Vec::new();
    while !c.done() {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| EditError::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(EditError::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let count = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let count = count.filter(|&n| n <= (buf.len() - c.pos) / 8).ok_or_else(|| {
            EditError::Format(format!("tensor {name} larger than remaining data"))
        })?;
        let bytes = c.take(count * 8)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(TensorEntry { name, dims, data });
    }
    Ok((config, tensors))
}

pub(crate) fn parse_config<T: DeserializeOwned>(json: &str) -> Result<T> {
    serde_json::from_str(json).map_err(|e| EditError::Format(format!("bad embedded config: {e}")))
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<TensorEntry> = self
            .weights
            .tensors()
            .into_iter()
            .map(|(n, t)| TensorEntry::from_matrix(&n, t, is_vector_tensor(&n)))
            .collect();
        let mut out = Vec::new();
        write_container(&mut out, MODEL_MAGIC, &canonical_json(&self.config)?, &tensors)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let (json, tensors) = read_container(bytes, MODEL_MAGIC)?;
        let config: ModelConfig = parse_config(&json)?;
        let template = crate::model::init_model(&config)?;
        let mut weights: Weights = template.weights.clone();
        let mut slots = weights.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(EditError::Format(format!("expected {} tensors, found {}", slots.len(), tensors.len())));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&tensors) {
            if *name != entry.name {
                return Err(EditError::Format(format!("expected tensor {name}, found {}", entry.name)));
            }
            let m = entry.to_matrix()?;
            if m.shape() != slot.shape() {
                return Err(EditError::Format(format!("tensor {name} has wrong shape")));
            }
            **slot = m;
        }
        drop(slots);
        Model::from_parts(config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_bytes(&std::fs::read(path)?)
    }
}
