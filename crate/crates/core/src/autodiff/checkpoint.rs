//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DPCK"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rows, u32 cols, f64 × rows·cols }
//! u32 has_moments (0 or 1)
//! if 1:
//!   u32 store_count, store_count × { u32 name_len, prefix, u64 adam_steps }
//!   u32 count, count × record   (first moments, same record layout)
//!   u32 count, count × record   (second moments, same record layout)
//! ```
//!
//! Several stores can share one file; their parameter names are prefixed
//! with `"{prefix}/"`.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub steps: Vec<(String, u64)>,
    pub first: Vec<(String, Tensor)>,
    pub second: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn from_stores(stores: &[(&str, &ParamStore)], with_moments: bool) -> Self {
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut steps = Vec::new();
        for (prefix, store) in stores {
            steps.push((prefix.to_string(), store.steps()));
            for p in store.params() {
                let name = format!("{prefix}/{}", p.name);
                params.push((name.clone(), p.value.clone()));
                first.push((name.clone(), p.m.clone()));
                second.push((name, p.v.clone()));
            }
        }
        Self {
            params,
            moments: with_moments.then_some(Moments { steps, first, second }),
        }
    }

    /// Copies the entries under `prefix` into `store`, which must already
    /// hold exactly the same names and shapes.
    pub fn restore_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let lead = format!("{prefix}/");
        let mine: Vec<_> = self
            .params
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s, t)))
            .collect();
        if mine.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} '{prefix}' parameters, model expects {}",
                mine.len(),
                store.len()
            )));
        }
        for (name, t) in &mine {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected parameter '{prefix}/{name}'")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "'{prefix}/{name}' is {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
        }
        if let Some(mom) = &self.moments {
            for (list, first) in [(&mom.first, true), (&mom.second, false)] {
                for (n, t) in list {
                    if let Some(name) = n.strip_prefix(&lead) {
                        let p = store.get_mut(name).ok_or_else(|| {
                            Error::ConfigMismatch(format!("moment for unknown parameter '{n}'"))
                        })?;
                        if p.value.shape() != t.shape() {
                            return Err(Error::ConfigMismatch(format!("moment shape mismatch for '{n}'")));
                        }
                        if first {
                            p.m = t.clone();
                        } else {
                            p.v = t.clone();
                        }
                    }
                }
            }
            if let Some((_, s)) = mom.steps.iter().find(|(p, _)| p == prefix) {
                store.set_steps(*s);
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_records(&mut out, &self.params);
        match &self.moments {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(m) => {
                out.extend_from_slice(&1u32.to_le_bytes());
                out.extend_from_slice(&(m.steps.len() as u32).to_le_bytes());
                for (name, s) in &m.steps {
                    write_name(&mut out, name);
                    out.extend_from_slice(&s.to_le_bytes());
                }
                write_records(&mut out, &m.first);
                write_records(&mut out, &m.second);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let params = read_records(&mut r)?;
        let moments = match r.u32()? {
            0 => None,
            1 => {
                let ns = r.u32()? as usize;
                let mut steps = Vec::with_capacity(ns);
                for _ in 0..ns {
                    let name = r.name()?;
                    steps.push((name, r.u64()?));
                }
                let first = read_records(&mut r)?;
                let second = read_records(&mut r)?;
                Some(Moments { steps, first, second })
            }
            f => return Err(r.err(&format!("bad moments flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn write_records(out: &mut Vec<u8>, recs: &[(String, Tensor)]) {
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in recs {
        write_name(out, name);
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_records(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut recs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.name()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        recs.push((name, Tensor::new(rows, cols, data)?));
    }
    Ok(recs)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            line: 0,
            msg: format!("checkpoint byte {}: {msg}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("parameter name is not UTF-8"))
    }
}
