//! Checkpoint files: `b"TMCK"`, u32 version, u32 length + model config JSON,
//! u32 tensor count, then per tensor u32 name length, name, u32 rank, u32
//! dims, f32 payload. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::params::ModelParams;
use super::tensor::Real;
use super::ModelConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TMCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint<F: Real>(params: &ModelParams<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.value {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<ModelParams<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected TMCK".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut params = ModelParams::<F>::init(&config, 0)?;
    let n = r.u32()? as usize;
    let expected = params.named_tensors().len();
    if n != expected {
        return Err(Error::Shape(format!("checkpoint has {n} tensors, model needs {expected}")));
    }
    let mut failure = None;
    let mut fill = |name: String, t: &mut super::Tensor<F>| -> Result<()> {
        let name_len = r.u32()? as usize;
        let stored = r.take(name_len)?;
        if stored != name.as_bytes() {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{}` where `{name}` was expected",
                String::from_utf8_lossy(stored)
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(Error::Shape(format!("tensor `{name}` has shape {shape:?}, expected {:?}", t.shape)));
        }
        let payload = r.take(4 * t.value.len())?;
        for (v, c) in t.value.iter_mut().zip(payload.chunks_exact(4)) {
            *v = F::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap();
        }
        Ok(())
    };
    params.layers.visit_mut(&mut |name, t| {
        if failure.is_none() {
            if let Err(e) = fill(name, t) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<ModelParams<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
