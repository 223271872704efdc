//! Checkpoint container: a little-endian named-array file holding model
//! parameters plus optimizer moments and step counter, so interrupted
//! training resumes bitwise-identically.
//!
//! Layout: magic "GFCK", version u32, array count u32, then per array
//! `[name-len u32][utf8 name][rank u32][dims u32 ...][f64 payload]`.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::OptimizerState;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GFCK";
const VERSION: u32 = 1;
const OPT_M: &str = "opt.m";
const OPT_V: &str = "opt.v";
const OPT_STEP: &str = "opt.step";

/// Write named arrays in order.
pub fn write_arrays(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, value) in arrays {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &x in value.as_slice() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Cursor {
    data: Vec<u8>,
    offset: usize,
}

impl Cursor {
    fn take<'a>(&'a mut self, n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: self.offset as u64,
                details: format!("truncated while reading {what}"),
            });
        }
        let s = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, path: &Path, what: &str) -> Result<u32> {
        let b = self.take(4, path, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read every named array from a checkpoint file.
pub fn read_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data, offset: 0 };

    let magic = cur.take(4, path, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            details: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = cur.u32(path, "version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 4,
            details: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = cur.u32(path, "array count")? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32(path, "name length")? as usize;
        let name_off = cur.offset as u64;
        let name_bytes = cur.take(name_len, path, "name")?.to_vec();
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            path: path.display().to_string(),
            offset: name_off,
            details: "array name is not valid UTF-8".into(),
        })?;
        let rank = cur.u32(path, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = cur.u32(path, "dimension")? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        let mut payload = Vec::with_capacity(numel);
        for _ in 0..numel {
            let b = cur.take(8, path, "payload")?;
            payload.push(f64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ]));
        }
        arrays.push((name, Tensor::from_vec(shape, payload)?));
    }
    if cur.offset != cur.data.len() {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: cur.offset as u64,
            details: format!("{} trailing bytes after last array", cur.data.len() - cur.offset),
        });
    }
    Ok(arrays)
}

/// Save parameters and optimizer state (moments + step counter).
pub fn save_checkpoint(path: &Path, store: &ParamStore, state: &OptimizerState) -> Result<()> {
    let numel = store.numel();
    if state.m.len() != numel || state.v.len() != numel {
        return Err(Error::dim(
            "save_checkpoint",
            format!("moments sized {} vs {} parameters", state.m.len(), numel),
        ));
    }
    let mut arrays: Vec<(String, Tensor)> = store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    arrays.push((OPT_M.into(), Tensor::from_vec(vec![numel], state.m.clone())?));
    arrays.push((OPT_V.into(), Tensor::from_vec(vec![numel], state.v.clone())?));
    arrays.push((
        OPT_STEP.into(),
        Tensor::from_vec(vec![1], vec![state.step as f64])?,
    ));
    write_arrays(path, &arrays)
}

/// Load a checkpoint into an existing store and optimizer state. Every
/// array must match a parameter by name and shape (or be one of the
/// optimizer entries), and every parameter must be present — anything
/// else means the checkpoint belongs to a different configuration.
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore,
    state: &mut OptimizerState,
) -> Result<()> {
    let arrays = read_arrays(path)?;
    let mismatch = |details: String| Err(Error::config("load_checkpoint", details));
    let numel = store.numel();

    let mut seen = std::collections::BTreeSet::new();
    let mut opt_m = None;
    let mut opt_v = None;
    let mut opt_step = None;
    for (name, value) in arrays {
        match name.as_str() {
            OPT_M => opt_m = Some(value),
            OPT_V => opt_v = Some(value),
            OPT_STEP => opt_step = Some(value),
            _ => {
                let Some(entry) = store.entries().iter().find(|e| e.name == name) else {
                    return mismatch(format!("checkpoint array {name:?} has no matching parameter"));
                };
                if entry.value.shape() != value.shape() {
                    return mismatch(format!(
                        "parameter {name:?} has shape {:?}, checkpoint holds {:?}",
                        entry.value.shape(),
                        value.shape()
                    ));
                }
                seen.insert(name.clone());
                store.set_by_name(&name, value)?;
            }
        }
    }
    if seen.len() != store.entries().len() {
        for e in store.entries() {
            if !seen.contains(&e.name) {
                return mismatch(format!("checkpoint is missing parameter {:?}", e.name));
            }
        }
    }
    let (m, v, step) = match (opt_m, opt_v, opt_step) {
        (Some(m), Some(v), Some(s)) => (m, v, s),
        _ => return mismatch("checkpoint is missing optimizer state".into()),
    };
    if m.numel() != numel || v.numel() != numel {
        return mismatch(format!(
            "optimizer moments sized {} / {} vs {numel} parameters",
            m.numel(),
            v.numel()
        ));
    }
    let step = step.item()?;
    if !(step >= 0.0 && step.fract() == 0.0) {
        return mismatch(format!("step counter {step} is not a nonnegative integer"));
    }
    state.m = m.as_slice().to_vec();
    state.v = v.as_slice().to_vec();
    state.step = step as u64;
    Ok(())
}
