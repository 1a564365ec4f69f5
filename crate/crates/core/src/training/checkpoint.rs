//! Binary checkpoints.
//!
//! Layout (little-endian): magic `ECGMOECK`, `u32` version, 32-byte SHA-256
//! digest of the model config, `u32` parameter count, then per parameter a
//! `u32` name length, the UTF-8 name, `u32` rank, `u32` dims and the values
//! as `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EcgMoe, ModelConfig};
use crate::nn::Module;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ECGMOECK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<S: Scalar>(model: &EcgMoe<S>) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(64 + model.num_params() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().digest());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Rebuilds a model for `config` and loads the stored weights into it.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8], config: &ModelConfig) -> Result<EcgMoe<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest = r.take(32, "config digest")?;
    if digest != config.digest() {
        return Err(Error::ConfigDigestMismatch);
    }
    let mut model = EcgMoe::<S>::new(config.clone(), 0)?;
    let count = r.u32("parameter count")? as usize;
    let expected = model.params().len();
    if count != expected {
        r.pos -= 4;
        return Err(r.fail(format!("{count} parameters stored, model has {expected}")));
    }
    for p in model.params_mut() {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = r.take(name_len, "parameter name")?;
        if name != p.name.as_bytes() {
            r.pos = start;
            return Err(r.fail(format!("expected parameter `{}`", p.name)));
        }
        let rank = r.u32("rank")? as usize;
        if rank != p.shape().len() {
            return Err(r.fail(format!("rank {rank} for `{}`, expected {}", p.name, p.shape().len())));
        }
        for (i, &d) in p.shape().to_vec().iter().enumerate() {
            let got = r.u32("dimension")? as usize;
            if got != d {
                return Err(r.fail(format!("dimension {i} of `{}` is {got}, expected {d}", p.name)));
            }
        }
        let raw = r.take(8 * p.value.len(), "parameter values")?;
        for (v, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = S::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &EcgMoe<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path, config: &ModelConfig) -> Result<EcgMoe<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, config)
}
