//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "RLTMODEL"
//! version  u32
//! config   7 × u64  vocab, context, layers, heads, d_model, d_ff, seed
//! step     u64
//! count    u32
//! tensor*  name_len u32, name utf-8, ndim u32, dims ndim × u64, data f32*
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::ModelState;
use super::params::{Layout, Params, Tensor};
use super::real::Real;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RLTMODEL";
pub const VERSION: u32 = 1;

pub fn encode_model<F: Real>(model: &ModelState<F>) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::with_capacity(64 + model.params.num_scalars() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.vocab_size as u64,
        c.context_window as u64,
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_model as u64,
        c.d_ff as u64,
        c.seed,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&model.step_count.to_le_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::FormatError("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::FormatError("size overflow".into()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelState<f32>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::FormatError("bad magic bytes".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::FormatError("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::FormatError(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: r.usize()?,
        context_window: r.usize()?,
        n_layers: r.usize()?,
        n_heads: r.usize()?,
        d_model: r.usize()?,
        d_ff: r.usize()?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::FormatError(format!("config block: {e}")))?;
    let step_count = r.u64()?;
    let count = r.u32()? as usize;
    let expected = Layout::shapes(&config);
    if count != expected.len() {
        return Err(Error::FormatError(format!(
            "{count} tensors, layout needs {}",
            expected.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::FormatError("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if name != want_name || shape != want_shape {
            return Err(Error::FormatError(format!(
                "tensor {name}{shape:?}, expected {want_name}{want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor { shape, data }));
    }
    if r.pos != body.len() {
        return Err(Error::FormatError("trailing bytes".into()));
    }
    let params = Params::new(entries);
    if !params.all_finite() {
        return Err(Error::FormatError("non-finite parameter".into()));
    }
    Ok(ModelState {
        config,
        params,
        step_count,
    })
}

pub fn save_model<F: Real>(model: &ModelState<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Loads a checkpoint and checks it against the tokenizer's vocabulary size.
pub fn load_model_for_vocab(path: impl AsRef<Path>, vocab_size: usize) -> Result<ModelState<f32>> {
    let model = load_model(path)?;
    if model.config.vocab_size != vocab_size {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint vocab {} != tokenizer vocab {vocab_size}",
            model.config.vocab_size
        )));
    }
    Ok(model)
}
