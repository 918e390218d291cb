//! Binary checkpoint framing.
//!
//! ```text
//! "SIMICLCK" | u32 version | u32 len + JSON ModelConfig
//! | u32 count | count × tensor
//! | u8 has_optimizer [ | u64 step | u32 count | count × tensor ]
//! tensor := u32 len + UTF-8 name | u32 ndim | ndim × u64 dim | f32 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{param_layout, ModelConfig, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;

const MAGIC: &[u8; 8] = b"SIMICLCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, prefix: &str, config: &ModelConfig, tensors: &[&Tensor<f32>]) {
    put_u32(out, tensors.len() as u32);
    for (spec, t) in param_layout(config).iter().zip(tensors) {
        let name = format!("{prefix}{}", spec.name);
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(out, d as u64);
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self, prefix: &str, config: &ModelConfig) -> Result<ModelParams<f32>> {
        let layout = param_layout(config);
        let count = self.u32()? as usize;
        if count != layout.len() {
            return Err(Error::ConfigMismatch(format!("{count} tensors stored, config needs {}", layout.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for spec in &layout {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|e| Error::format("checkpoint", format!("tensor name: {e}")))?;
            let expected = format!("{prefix}{}", spec.name);
            if name != expected {
                return Err(Error::ConfigMismatch(format!("found tensor `{name}` where `{expected}` belongs")));
            }
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format("checkpoint", format!("{name}: shape overflows")))?;
            let bytes = self.take(numel.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { shape, data });
        }
        ModelParams::from_tensors(config, tensors)
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Checkpoint { params, optimizer: None }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = &self.params.config;
        let mut out = Vec::with_capacity(16 + 4 * config.param_count());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let json = serde_json::to_string(config).expect("config serializes");
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(json.as_bytes());
        put_tensors(&mut out, "", config, &self.params.tensors());
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                put_u64(&mut out, state.step);
                put_tensors(&mut out, "adamw.m.", config, &state.m.tensors());
                put_tensors(&mut out, "adamw.v.", config, &state.v.tensors());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format("checkpoint config", e.to_string()))?;
        let params = r.tensors("", &config)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.tensors("adamw.m.", &config)?;
                let v = r.tensors("adamw.v.", &config)?;
                Some(OptimizerState { step, m, v })
            }
            other => return Err(Error::format("checkpoint", format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        checkpoint_digest(&self.to_bytes())
    }
}

pub fn checkpoint_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    #[test]
    fn byte_exact_round_trip() {
        let params = init_params(&ModelConfig::toy(2, 16, 4), 5).unwrap();
        let mut ck = Checkpoint::new(params);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let mut state = OptimizerState::new(&ck.params);
        state.step = 17;
        state.m.head_b.data[3] = -0.25;
        ck.optimizer = Some(state);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new(init_params(&ModelConfig::toy(1, 8, 2), 0).unwrap());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
