//! `FPCK` checkpoints: model config plus named parameters.
//!
//! Layout (little-endian), sharing the 24-byte header shape of `FPEB`:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `b"FPCK"`                    |
//! | 4      | 2    | format version (`1`)               |
//! | 6      | 2    | dtype code (`0` = f32 LE)          |
//! | 8      | 4    | config JSON length in bytes        |
//! | 12     | 4    | parameter count                    |
//! | 16     | 4    | total scalar count                 |
//! | 20     | 4    | reserved, zero                     |
//! | 24     | ...  | config JSON (UTF-8)                |
//!
//! then per parameter: name length u16, name bytes, rank u16, dims u32 × rank, values f32 × prod(dims).

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FPCK";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(HEADER_LEN + config.len() + model.params.scalar_count() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.params.scalar_count() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&config);
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u16).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.bad(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bad(&self, detail: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail,
        }
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.bad("not an FPCK checkpoint".into()));
    }
    let version = r.u16()?;
    let dtype = r.u16()?;
    if version != VERSION || dtype != 0 {
        return Err(r.bad(format!("unsupported version {version} / dtype {dtype}")));
    }
    let config_len = r.u32()? as usize;
    let count = r.u32()? as usize;
    let _scalars = r.u32()?;
    let _reserved = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    let mut model = Model::new(config)?;
    if count != model.params.len() {
        return Err(r.bad(format!(
            "checkpoint holds {count} parameters, the configured model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.bad("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u16()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.assign(&name, Tensor::new(dims, values)?)?;
    }
    if r.pos != bytes.len() {
        return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
