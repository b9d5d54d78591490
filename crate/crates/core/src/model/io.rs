//! Checkpoint container.
//!
//! ```text
//! magic        8 bytes  "QLABCKPT"
//! version      u32 LE   (1)
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON: {"config": …, "meta": …}
//! n_sections   u32 LE
//! section*     kind u8, name_len u16 LE, name (UTF-8), ndim u8, dims u32 LE × ndim
//!   kind 0     f32 LE × prod(dims)                       (parameter tensor)
//!   kind 1     bits u8, group_size u32 LE, n_groups u32 LE,
//!              f64 LE scales × (rows·n_groups), i8 codes × (rows·cols)
//!                                                        (quantized weight, optional)
//! ```
//!
//! Parameter sections are written in name order. Quantized sections carry
//! the module path of the weight they describe and come after all
//! parameters.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, ParamMap, TrainingMeta};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quant::{GroupQuantSpec, QuantizedWeight};

pub const MAGIC: &[u8; 8] = b"QLABCKPT";
pub const VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_QUANTIZED: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn put_name(out: &mut Vec<u8>, name: &str, dims: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| bad("dimension overflows u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Serializes a checkpoint, optionally with quantized-weight debug sections.
pub fn encode(ck: &ModelCheckpoint, quantized: &[(String, QuantizedWeight)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: ck.config.clone(),
        meta: ck.meta.clone(),
    })
    .map_err(|e| bad(e.to_string()))?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);

    let grid: Vec<&(String, QuantizedWeight)> = quantized.iter().filter(|(_, q)| q.codes().is_some()).collect();
    out.extend_from_slice(&((ck.params().len() + grid.len()) as u32).to_le_bytes());
    for (name, t) in ck.params() {
        if !t.is_f32_exact() {
            return Err(bad(format!("{name} holds values not representable as f32")));
        }
        out.push(KIND_TENSOR);
        put_name(&mut out, name, t.shape())?;
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for (name, q) in grid {
        out.push(KIND_QUANTIZED);
        put_name(&mut out, name, &q.shape())?;
        let spec = q.spec();
        out.push(spec.bits);
        out.extend_from_slice(&(spec.group_size as u32).to_le_bytes());
        out.extend_from_slice(&(spec.groups_per_row(q.shape()[1]) as u32).to_le_bytes());
        for s in q.scales().expect("grid weight") {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend(q.codes().expect("grid weight").iter().map(|&c| c as u8));
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn name_and_dims(&mut self) -> Result<(String, Vec<usize>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| bad("section name is not UTF-8"))?
            .to_string();
        let ndim = self.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        Ok((name, dims))
    }
}

/// Parses a checkpoint and any quantized-weight sections it carries.
pub fn decode(bytes: &[u8]) -> Result<(ModelCheckpoint, Vec<(String, QuantizedWeight)>)> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| bad(e.to_string()))?;
    let sections = c.u32()?;
    let mut params = ParamMap::new();
    let mut quantized = Vec::new();
    for _ in 0..sections {
        let kind = c.u8()?;
        let (name, dims) = c.name_and_dims()?;
        let n: usize = dims.iter().product();
        match kind {
            KIND_TENSOR => {
                let raw = c.take(n * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                if params.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
                    return Err(bad(format!("duplicate tensor {name}")));
                }
            }
            KIND_QUANTIZED => {
                let &[rows, cols] = dims.as_slice() else {
                    return Err(bad(format!("quantized section {name} is not 2-D")));
                };
                let bits = c.u8()?;
                let group_size = c.u32()? as usize;
                let groups = c.u32()? as usize;
                let spec = GroupQuantSpec::new(bits, group_size)?;
                if groups != spec.groups_per_row(cols) {
                    return Err(bad(format!("{name}: group count {groups} disagrees with shape")));
                }
                let scales = c
                    .take(rows * groups * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                let codes = c.take(rows * cols)?.iter().map(|&b| b as i8).collect();
                quantized.push((name, QuantizedWeight::from_parts(spec, rows, cols, scales, codes)?));
            }
            other => return Err(bad(format!("unknown section kind {other}"))),
        }
    }
    if c.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let ck = ModelCheckpoint::from_params(header.config, header.meta, params)?;
    Ok((ck, quantized))
}

pub fn save_checkpoint(ck: &ModelCheckpoint, path: &Path) -> Result<()> {
    save_checkpoint_with(ck, &[], path)
}

pub fn save_checkpoint_with(ck: &ModelCheckpoint, quantized: &[(String, QuantizedWeight)], path: &Path) -> Result<()> {
    let bytes = encode(ck, quantized)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    Ok(load_checkpoint_with(path)?.0)
}

pub fn load_checkpoint_with(path: &Path) -> Result<(ModelCheckpoint, Vec<(String, QuantizedWeight)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}
