//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"UMCK"` |
//! | version | u32 (= 1) |
//! | config length, config | u32, canonical JSON of [`SegModelConfig`] |
//! | config hash | 64 ASCII hex chars, SHA-256 of the config bytes |
//! | run hash length, run hash | u32, UTF-8 (hash of the training config, may be empty) |
//! | view token | 6 ASCII bytes |
//! | dropout seed | u64 |
//! | dtype | u32 (2 = f32, 3 = f64) |
//! | parameter count, parameters | u64, `n × dtype` |
//! | optimizer flag | u8; if 1: lr, momentum, weight decay (f64), steps (u64), velocity (`n × dtype`) |

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::model::{SegModelConfig, ViewModel};
use crate::nn::optim::Sgd;
use crate::real::Real;
use crate::views::ViewTransform;

const MAGIC: &[u8; 4] = b"UMCK";
const VERSION: u32 = 1;

pub fn config_hash(cfg: &SegModelConfig) -> String {
    let json = crate::config::canonical_json(cfg).expect("model config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub model: ViewModel<T>,
    pub optimizer: Option<Sgd<T>>,
    pub run_hash: String,
}

pub fn encode<T: Real>(model: &ViewModel<T>, optimizer: Option<&Sgd<T>>, run_hash: &str) -> Vec<u8> {
    let cfg_json = crate::config::canonical_json(model.config()).expect("model config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_json.as_bytes());
    out.extend_from_slice(hex::encode(Sha256::digest(cfg_json.as_bytes())).as_bytes());
    out.extend_from_slice(&(run_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(run_hash.as_bytes());
    out.extend_from_slice(model.view().token().as_bytes());
    out.extend_from_slice(&model.dropout_seed.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.to_le_bytes());
    out.extend_from_slice(&(model.n_params() as u64).to_le_bytes());
    for &p in model.params() {
        p.write_le(&mut out);
    }
    match optimizer {
        Some(opt) => {
            out.push(1);
            for v in [opt.lr, opt.momentum, opt.weight_decay] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&opt.steps.to_le_bytes());
            for &v in &opt.velocity {
                v.write_le(&mut out);
            }
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| self.err("invalid UTF-8"))
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg_json = r.str(n)?;
    let stored_hash = r.str(64)?;
    let actual_hash = hex::encode(Sha256::digest(cfg_json.as_bytes()));
    if stored_hash != actual_hash {
        return Err(Error::HashMismatch {
            expected: stored_hash.to_string(),
            found: actual_hash,
        });
    }
    let cfg: SegModelConfig = serde_json::from_str(cfg_json)?;
    let n = r.u32()? as usize;
    let run_hash = r.str(n)?.to_string();
    let view: ViewTransform = r.str(6)?.parse()?;
    let dropout_seed = r.u64()?;
    let dtype = r.u32()?;
    if dtype != T::DTYPE {
        return Err(r.err(format!("dtype {dtype} does not match requested {}", T::DTYPE)));
    }
    let n_params = r.u64()? as usize;
    let read_vec = |r: &mut Reader| -> Result<Vec<T>> {
        let raw = r.take(n_params * T::BYTES)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    };
    let params = read_vec(&mut r)?;
    let model = ViewModel::from_params(&cfg, view, params, dropout_seed)?;
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let (lr, momentum, weight_decay) = (r.f64()?, r.f64()?, r.f64()?);
            let steps = r.u64()?;
            let velocity = read_vec(&mut r)?;
            Some(Sgd { lr, momentum, weight_decay, velocity, steps })
        }
        f => return Err(r.err(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint { model, optimizer, run_hash })
}

pub fn save<T: Real>(path: &Path, model: &ViewModel<T>, optimizer: Option<&Sgd<T>>, run_hash: &str) -> Result<()> {
    std::fs::write(path, encode(model, optimizer, run_hash))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}
