//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "CIPK" | version u32 | manifest_len u64 | manifest (UTF-8 JSON)
//! tensor_count u32
//! per tensor: name_len u32 | name | rank u32 | dims u64 × rank | f32 × Π dims
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CriticSpec, GeneratorSpec};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::grid_field::PdeParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CIPK";
const VERSION: u32 = 1;
const MAX_MANIFEST: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub checkpoint_id: String,
    pub iteration: u64,
    /// Validation MAE of the stored (f32) generator parameters.
    pub val_mae: f64,
    pub grid_n: usize,
    pub scale: f64,
    pub pde: PdeParams,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
    pub dataset_hash: String,
    /// The training configuration that produced this checkpoint.
    pub config: serde_json::Value,
}

pub fn write_checkpoint(path: &Path, manifest: &CheckpointManifest, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated checkpoint while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, message: String) -> Result<T> {
        Err(Error::Format { offset: self.offset, message })
    }
}

fn open(path: &Path) -> Result<Cursor<BufReader<File>>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(Cursor { inner: BufReader::new(file), offset: 0 })
}

fn manifest_from<R: Read>(c: &mut Cursor<R>) -> Result<CheckpointManifest> {
    if c.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return c.fail("not a checkpoint (bad magic)".into());
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return c.fail(format!("unsupported checkpoint version {version}"));
    }
    let len = c.u64("manifest length")?;
    if len > MAX_MANIFEST {
        return c.fail(format!("manifest length {len} is implausible"));
    }
    let json = c.bytes(len as usize, "manifest")?;
    Ok(serde_json::from_slice(&json)?)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    manifest_from(&mut open(path)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let mut c = open(path)?;
    let manifest = manifest_from(&mut c)?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = match String::from_utf8(c.bytes(name_len, "tensor name")?) {
            Ok(s) => s,
            Err(_) => return c.fail("tensor name is not UTF-8".into()),
        };
        let rank = c.u32("rank")?;
        if rank > 8 {
            return c.fail(format!("tensor {name} has implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel.filter(|&n| n <= 1 << 32) else {
            return c.fail(format!("tensor {name} has implausible shape {shape:?}"));
        };
        let raw = c.bytes(numel * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    let mut rest = [0u8; 1];
    if c.inner.read(&mut rest)? != 0 {
        return c.fail("trailing bytes after the last tensor".into());
    }
    Ok((manifest, tensors))
}
