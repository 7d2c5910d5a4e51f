//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "T4T1" | version | snapshot_len | snapshot (UTF-8 config text)
//! | param_count | { name_len | name | rank | dims[rank] | f32 data[numel] }*
//! ```
//!
//! The snapshot is the architecture part of the run configuration; loading
//! into a model built from a different snapshot is an error.

use std::fs;
use std::path::Path;

use crate::decoder::Trans4Trans;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"T4T1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub snapshot: String,
    pub params: Vec<StoredParam>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit the u32 checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Trans4Trans<T>, snapshot: &str) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect();
        Self { version: VERSION, snapshot: snapshot.to_string(), params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version as usize)?;
        put_u32(&mut out, self.snapshot.len())?;
        out.extend_from_slice(self.snapshot.as_bytes());
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len())?;
            for &d in &p.shape {
                put_u32(&mut out, d)?;
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let snapshot = r.string()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("parameter too large".into()))?)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            params.push(StoredParam { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last parameter", buf.len() - r.pos)));
        }
        Ok(Self { version, snapshot, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies stored values into `model`, which must come from `snapshot`.
    pub fn apply<T: Scalar>(&self, model: &mut Trans4Trans<T>, snapshot: &str) -> Result<()> {
        if self.snapshot != snapshot {
            let diff = self
                .snapshot
                .lines()
                .zip(snapshot.lines())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!(": stored `{a}`, expected `{b}`"))
                .unwrap_or_default();
            return Err(Error::Config(format!("checkpoint was saved for a different configuration{diff}")));
        }
        if self.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, stored) in ids.into_iter().zip(&self.params) {
            if model.params.name(id) != stored.name {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} where the model expects {}",
                    stored.name,
                    model.params.name(id)
                )));
            }
            let data = stored.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            model.params.set(id, Tensor::new(stored.shape.clone(), data)?)?;
        }
        Ok(())
    }
}
