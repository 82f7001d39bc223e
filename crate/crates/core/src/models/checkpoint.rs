//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes  "ATTNWCK1"
//! spec_len   u32 LE, then that many bytes of key=value model spec
//! n_records  u32 LE
//! record     u16 name_len, name, u8 kind (0 parameter, 1 buffer),
//!            u8 ndim, ndim × u32 dims, prod(dims) × f32 LE
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ATTNWCK1";
const FORMAT: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Parameter,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: RecordKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_model(model: &mut Model<f32>) -> Self {
        let mut records: Vec<Record> = model
            .parameters()
            .into_iter()
            .map(|p| Record {
                name: p.name,
                kind: RecordKind::Parameter,
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.to_vec(),
            })
            .collect();
        records.extend(model.buffers_mut().into_iter().map(|b| Record {
            name: b.name,
            kind: RecordKind::Buffer,
            shape: vec![b.values.len()],
            data: b.values.clone(),
        }));
        Self {
            spec: *model.spec(),
            records,
        }
    }

    /// Builds the model and copies every record into it. Every tensor of the
    /// model must be present with a matching shape.
    pub fn into_model(self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::build(&self.spec)?;
        let mut records: std::collections::HashMap<(String, RecordKind), Record> = self
            .records
            .into_iter()
            .map(|r| ((r.name.clone(), r.kind), r))
            .collect();
        let mut take = |name: &str, kind: RecordKind, shape: &[usize]| -> Result<Vec<f32>> {
            let r = records
                .remove(&(name.to_string(), kind))
                .ok_or_else(|| Error::format(FORMAT, format!("missing record '{name}'")))?;
            if r.shape != shape {
                return Err(Error::format(
                    FORMAT,
                    format!("record '{name}' has shape {:?}, model expects {shape:?}", r.shape),
                ));
            }
            Ok(r.data)
        };
        for p in model.parameters() {
            let data = take(&p.name, RecordKind::Parameter, p.tensor.shape())?;
            *p.tensor.data_mut() = data;
        }
        for b in model.buffers_mut() {
            let len = b.values.len();
            *b.values = take(&b.name, RecordKind::Buffer, &[len])?;
        }
        if let Some((name, _)) = records.keys().next() {
            return Err(Error::format(FORMAT, format!("unexpected record '{name}'")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let spec = self.spec.to_kv();
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(match r.kind {
                RecordKind::Parameter => 0,
                RecordKind::Buffer => 1,
            });
            out.push(r.shape.len() as u8);
            for d in &r.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(FORMAT, "bad magic"));
        }
        let spec_len = cur.u32()? as usize;
        let spec_text =
            std::str::from_utf8(cur.take(spec_len)?).map_err(|_| Error::format(FORMAT, "model spec is not UTF-8"))?;
        let spec = ModelSpec::from_kv(spec_text)?;
        let n = cur.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = u16::from_le_bytes(cur.array()?) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::format(FORMAT, "record name is not UTF-8"))?;
            let kind = match cur.take(1)?[0] {
                0 => RecordKind::Parameter,
                1 => RecordKind::Buffer,
                k => return Err(Error::format(FORMAT, format!("record '{name}' has unknown kind {k}"))),
            };
            let ndim = cur.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = cur.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::format(FORMAT, "record too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(Record {
                name,
                kind,
                shape,
                data,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(
                FORMAT,
                format!("{} trailing bytes", bytes.len() - cur.pos),
            ));
        }
        Ok(Self { spec, records })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(FORMAT, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn write_checkpoint(model: &mut Model<f32>) -> Vec<u8> {
    Checkpoint::from_model(model).to_bytes()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    Checkpoint::from_bytes(bytes)?.into_model()
}

pub fn save_checkpoint(model: &mut Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
