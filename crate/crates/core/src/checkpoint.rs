//! Portable binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes  "STILTCK1"
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! config_hash  32 bytes, SHA-256 of the config JSON bytes
//! count        u32      number of tensors
//! count × {
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rows       u32
//!   cols       u32
//!   data       rows·cols × f64, row-major
//! }
//! ```
//!
//! Tensors appear in parameter order (see [`ParamSet`]) followed by the six
//! normalisation running statistics. Trainable flags and gradients are not
//! stored; a loaded model is fully trainable.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, StiltError};
use crate::model::{Model, ModelConfig};
use crate::rng::DeterministicRng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, ParamSet};

pub const MAGIC: &[u8; 8] = b"STILTCK1";

pub fn config_hash(config: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serialises");
    Sha256::digest(&json).into()
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let json = serde_json::to_vec(model.config()).expect("config serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    let mut tensors: Vec<(String, &Matrix<T>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, &p.value))
        .collect();
    tensors.extend(model.running_stats());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<Model<T>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let len = r.u32()?;
    let json = r.take(len)?;
    let hash = r.take(32)?;
    if Sha256::digest(json).as_slice() != hash {
        return Err("config hash mismatch".into());
    }
    let config: ModelConfig =
        serde_json::from_slice(json).map_err(|e| format!("config: {e}"))?;
    // Weights are overwritten below; the seed is irrelevant.
    let mut model = Model::<T>::init(&config, &mut DeterministicRng::new(0))
        .map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut read = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        let data = (0..rows * cols)
            .map(|_| r.f64().map(T::cst))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        read.push((name, Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut read = read.into_iter();
    let mut place = |name: String, slot: &mut Matrix<T>| -> std::result::Result<(), String> {
        let (got, m) = read
            .next()
            .ok_or_else(|| format!("missing tensor {name}"))?;
        if got != name || m.shape() != slot.shape() {
            return Err(format!(
                "expected {name} {}, found {got} {}",
                slot.shape_str(),
                m.shape_str()
            ));
        }
        *slot = m;
        Ok(())
    };
    for (name, p) in model.params_mut() {
        place(name, &mut p.value)?;
    }
    for (name, m) in model.running_stats_mut() {
        place(name, m)?;
    }
    if read.next().is_some() {
        return Err("unexpected extra tensors".into());
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| StiltError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| StiltError::io(path, e))?;
    decode(&bytes).map_err(|reason| StiltError::Parse {
        path: path.to_path_buf(),
        reason,
    })
}
