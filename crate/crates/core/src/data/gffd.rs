//! GFFD: the on-disk dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "GFFD"
//! version u32      1
//! d       u32      coordinate dimension
//! p       u32      value channels
//! count   u32      number of samples
//! per sample:
//!   m     u32      point count
//!   f32 coords  m*d
//!   f32 values  m*p
//! ```
//!
//! Values are stored in f32; reading widens back to f64. Metadata that
//! the format does not carry (normalization stats) is recomputed on read
//! from the default training split, so a written-then-read dataset is
//! self-consistent without side files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{DatasetMeta, FieldDataset, FieldSample, NormStats, Split};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

const MAGIC: &[u8; 4] = b"GFFD";
const VERSION: u32 = 1;

/// Exact size in bytes a dataset occupies on disk.
pub fn expected_file_size(ds: &FieldDataset) -> u64 {
    let mut size = 4 + 4 + 4 + 4 + 4u64;
    for s in &ds.samples {
        let m = s.cloud.len() as u64;
        size += 4 + 4 * m * ds.meta.dim as u64 + 4 * m * ds.meta.channels as u64;
    }
    size
}

/// Serialize a dataset to `path`, overwriting any existing file.
pub fn write_dataset(path: &Path, ds: &FieldDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    emit(&mut w, MAGIC)?;
    emit(&mut w, &VERSION.to_le_bytes())?;
    emit(&mut w, &(ds.meta.dim as u32).to_le_bytes())?;
    emit(&mut w, &(ds.meta.channels as u32).to_le_bytes())?;
    emit(&mut w, &(ds.samples.len() as u32).to_le_bytes())?;
    for s in &ds.samples {
        emit(&mut w, &(s.cloud.len() as u32).to_le_bytes())?;
        for &c in s.cloud.coords() {
            emit(&mut w, &(c as f32).to_le_bytes())?;
        }
        for &v in &s.values {
            emit(&mut w, &(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                path: path.display().to_string(),
                offset: self.offset,
                details: format!("file truncated while reading {what}"),
            }),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn u32(&mut self, path: &Path, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, path, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32_block(&mut self, n: usize, path: &Path, what: &str) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 4];
        self.take(&mut bytes, path, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Deserialize a dataset from `path`. Normalization stats are recomputed
/// over the default training split of the loaded samples.
pub fn read_dataset(path: &Path) -> Result<FieldDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            details: format!("bad magic {magic:?}, want {MAGIC:?}"),
        });
    }
    let version = r.u32(path, "version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 4,
            details: format!("unsupported version {version}, want {VERSION}"),
        });
    }
    let d = r.u32(path, "dimension")? as usize;
    let p = r.u32(path, "channels")? as usize;
    let count = r.u32(path, "sample count")? as usize;
    if !(1..=3).contains(&d) || p == 0 || count == 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 8,
            details: format!("invalid header: d={d}, p={p}, count={count}"),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let m = r.u32(path, &format!("point count of sample {i}"))? as usize;
        if m == 0 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: r.offset - 4,
                details: format!("sample {i} has zero points"),
            });
        }
        let coords = r.f32_block(m * d, path, &format!("coordinates of sample {i}"))?;
        let values = r.f32_block(m * p, path, &format!("values of sample {i}"))?;
        let cloud = PointCloud::new(coords, d, "gffd-file")?;
        samples.push(FieldSample::new(cloud, values, p)?);
    }
    // Reject trailing garbage so corrupt files fail loudly.
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: r.offset,
                details: "trailing bytes after final sample".into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    let stats = if samples.len() > 1 {
        let split = Split::default_for(samples.len())?;
        NormStats::compute(&samples, &split.train)?
    } else {
        NormStats::compute(&samples, &[0])?
    };
    FieldDataset::new(
        samples,
        DatasetMeta {
            dim: d,
            channels: p,
            generator: "gffd-file".into(),
            root_seed: 0,
            stats,
        },
    )
}
