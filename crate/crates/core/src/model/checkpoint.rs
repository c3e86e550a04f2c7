//! Binary checkpoint format.
//!
//! ```text
//! "SCKD"            4 bytes magic
//! version           u32 LE (currently 1)
//! count             u32 LE
//! count × {
//!   name_len        u16 LE, then name_len bytes of UTF-8
//!   ndim            u8, then ndim × u32 LE extents
//!   dtype           u8 (0 = f32)
//!   values          product(extents) × f32 LE
//! }
//! ```
//!
//! Parameters are written in lexicographic name order, so saving the same
//! set always produces the same bytes. Values are stored as `f32`; loading
//! widens them back to `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{param_specs, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCKD";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn to_bytes(params: &ParameterSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("{name}: too many dims")))?;
        out.push(ndim);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("{name}: extent too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. With `expected`, every record's name and shape must
/// match it, checked before the record's values are read.
fn parse(bytes: &[u8], expected: Option<&BTreeMap<String, Vec<usize>>>) -> Result<ParameterSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")? as usize;
    if let Some(exp) = expected {
        if exp.len() != count {
            return Err(Error::shape(
                "checkpoint",
                format!("{count} parameters stored, configuration has {}", exp.len()),
            ));
        }
    }
    let mut set = ParameterSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        if let Some(exp) = expected {
            match exp.get(&name) {
                Some(s) if *s == shape => {}
                Some(s) => {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("{name}: stored {shape:?}, configuration wants {s:?}"),
                    ));
                }
                None => {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("{name}: not part of the configuration"),
                    ))
                }
            }
        }
        if shape.contains(&0) {
            return Err(Error::shape("checkpoint", format!("{name}: zero extent in {shape:?}")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::shape("checkpoint", format!("{name}: extents overflow")))?;
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, values).map_err(|_| Error::Checkpoint(format!("{name}: non-finite value")))?;
        if set.insert(name.clone(), t.with_grad()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(set)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    parse(bytes, None)
}

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and checks that it holds exactly the parameters
/// `config` builds, with matching shapes.
pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<ParameterSet> {
    let expected: BTreeMap<String, Vec<usize>> = param_specs(config)?.into_iter().map(|s| (s.name, s.shape)).collect();
    parse(&fs::read(path)?, Some(&expected))
}
