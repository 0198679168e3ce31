//! `NTLF` checkpoint container.
//!
//! Layout (little-endian): magic, `u32` version, seven `u64` config fields,
//! `u32` tensor count, then per tensor a `u32` rank, `u64` dims and `f32`
//! data. An optional optimizer section (flag byte, `u64` step, moments in
//! the same tensor layout) and a length-prefixed UTF-8 metadata block
//! follow.

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, ModelConfig, ModelError, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NTLF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub optimizer: Option<AdamState<f32>>,
    /// Free-form text stored alongside the weights (the training config).
    pub metadata: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.params.config;
        for v in [c.vocab_size, c.context_length, c.d_model, c.n_heads, c.n_layers, c.d_ff] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        put_tensors(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                put_tensors(&mut out, &state.m);
                put_tensors(&mut out, &state.v);
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic bytes, not an NTLF checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(version));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = usize::try_from(r.u64()?).map_err(|_| ModelError::Checkpoint("dimension overflow".into()))?;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            context_length: dims[1],
            d_model: dims[2],
            n_heads: dims[3],
            n_layers: dims[4],
            d_ff: dims[5],
            seed: r.u64()?,
        };
        config.validate()?;
        let params = r.tensors(config)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.tensors(config)?;
                let v = r.tensors(config)?;
                Some(AdamState { step, m, v })
            }
            f => return Err(ModelError::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        let len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("metadata is not UTF-8".into()))?;
        if r.at != bytes.len() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self {
            params,
            optimizer,
            metadata,
        })
    }
}

fn put_tensors(out: &mut Vec<u8>, p: &Parameters<f32>) {
    let tensors = p.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self, config: ModelConfig) -> Result<Parameters<f32>, ModelError> {
        let mut params = Parameters::<f32>::zeros(config);
        let count = self.u32()? as usize;
        let mut views = params.tensors_mut();
        if count != views.len() {
            return Err(ModelError::Checkpoint(format!(
                "{count} tensors, config implies {}",
                views.len()
            )));
        }
        for (i, view) in views.iter_mut().enumerate() {
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if shape != view.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {i} has shape {shape:?}, expected {:?}",
                    view.shape()
                )));
            }
            let data = self.take(view.len() * 4)?;
            for (dst, chunk) in view.iter_mut().zip(data.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        drop(views);
        Ok(params)
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
