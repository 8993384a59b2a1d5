//! Binary checkpoint format for trained parameters.
//!
//! Layout: an 8-byte magic, a little-endian `u32` version, a JSON metadata
//! block (length-prefixed), then each parameter in storage order as
//! length-prefixed name, dimension list, and raw little-endian `f32` data.
//! Weights round-trip bit for bit; loading validates the full manifest
//! (names, shapes, order) against the architecture in the metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::enhancer::{parameter_manifest, NetConfig};
use crate::error::{Error, Result};
use crate::params::ModelParameters;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLIGHTCP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the inference pipeline around the weights:
/// the architecture plus the seeds of the two frozen backends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub seg_seed: u64,
    pub vl_seed: u64,
}

/// Writes parameters and metadata to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParameters,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let expected = parameter_manifest(&meta.net)?;
    if params.manifest() != expected {
        return Err(Error::Checkpoint(
            "parameter store does not match the architecture in the metadata".into(),
        ));
    }
    let json = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("cannot encode metadata: {e}")))?;
    let ioerr = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(ioerr)?);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(ioerr);
    out(CHECKPOINT_MAGIC)?;
    out(&CHECKPOINT_VERSION.to_le_bytes())?;
    out(&(json.len() as u64).to_le_bytes())?;
    out(&json)?;
    out(&(params.len() as u64).to_le_bytes())?;
    for (name, arr) in params.iter() {
        out(&(name.len() as u64).to_le_bytes())?;
        out(name.as_bytes())?;
        out(&(arr.ndim() as u64).to_le_bytes())?;
        for &d in arr.shape() {
            out(&(d as u64).to_le_bytes())?;
        }
        for &v in arr.iter() {
            out(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(ioerr)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Length fields bounded to catch corrupt files before huge allocations.
    fn len(&mut self, what: &str, max: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > max {
            return Err(Error::Checkpoint(format!(
                "implausible {what} length {v} in {}",
                self.path.display()
            )));
        }
        Ok(v as usize)
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParameters, CheckpointMeta)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.bytes(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let json_len = r.len("metadata", 1 << 20)?;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("cannot decode metadata: {e}")))?;
    let expected = parameter_manifest(&meta.net)?;

    let count = r.len("parameter table", 1 << 20)?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    let mut params = ModelParameters::new();
    for (want_name, want_shape) in &expected {
        let name_len = r.len("name", 4096)?;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if &name != want_name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: found {name:?}, expected {want_name:?}"
            )));
        }
        let ndim = r.len("rank", 8)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len("dimension", 1 << 32)?);
        }
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("validated shape");
        params.insert(name, arr)?;
    }
    // No trailing garbage.
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Checkpoint(format!(
                "{} has trailing data after the last tensor",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok((params, meta))
}
