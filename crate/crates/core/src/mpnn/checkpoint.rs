//! Binary weight files and their JSON sidecars.
//!
//! Layout: magic `GUQW`, version `u32`, array count `u32`, then for each
//! array a `u16` name length, the UTF-8 name, a `u8` rank, `rank` dims as
//! `u64` and the payload as `f64`, all little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archspace::{Genome, SearchSpace};
use crate::diffcore::Tensor;
use crate::molgraph::TargetScaler;

use super::{Model, ModelDims, ModelError};

const MAGIC: &[u8; 4] = b"GUQW";
const VERSION: u32 = 1;

/// Sidecar describing how to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub genome: Genome,
    pub dims: ModelDims,
    pub scaler: TargetScaler,
    pub init_seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_weights(path: &Path, arrays: &[(&str, &Tensor)]) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| bad(path, "array name too long"))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    let truncated = || bad(path, "truncated file");
    if c.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad(path, "missing GUQW magic"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let count = c.u32().ok_or_else(truncated)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad(path, "array name is not UTF-8"))?
            .to_string();
        let rank = c.u8().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data).map_err(|e| bad(path, e.to_string()))?));
    }
    if c.at != bytes.len() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(out)
}

pub(super) fn save(model: &Model, path: &Path, scaler: TargetScaler) -> Result<(), ModelError> {
    let arrays: Vec<(&str, &Tensor)> = model
        .names
        .iter()
        .map(String::as_str)
        .zip(&model.params)
        .collect();
    write_weights(path, &arrays)?;
    let meta = CheckpointMeta {
        genome: model.genome.clone(),
        dims: model.dims,
        scaler,
        init_seed: model.init_seed,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&side, text + "\n").map_err(io_err(&side))
}

pub(super) fn load(path: &Path) -> Result<(Model, TargetScaler), ModelError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| bad(&side, e.to_string()))?;
    let d = meta.dims;
    let mut model = Model::instantiate(
        &SearchSpace::default(),
        &meta.genome,
        d.n_max,
        d.f_n,
        d.f_e,
        meta.init_seed,
    )?;
    if model.dims != d {
        return Err(bad(&side, "hidden sizes disagree with the genome"));
    }
    let arrays = read_weights(path)?;
    if arrays.len() != model.params.len() {
        return Err(bad(
            path,
            format!("{} arrays, model needs {}", arrays.len(), model.params.len()),
        ));
    }
    for ((name, t), (want, slot)) in arrays.into_iter().zip(model.names.iter().zip(&mut model.params)) {
        if &name != want || t.shape() != slot.shape() {
            return Err(bad(
                path,
                format!("array {name} {:?} where {want} {:?} was expected", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    Ok((model, meta.scaler))
}
