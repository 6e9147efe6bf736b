//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"WRTSAMCK"
//! version u32
//! config  u64 length + UTF-8 JSON of the model config
//! stage   u8 (0 pretrain, 1 adapt)
//! count   u64
//! count x { u64 id length, id bytes, u8 trainable, 4 x u64 shape, f64 values }
//! ```
//!
//! Parameters are written in id order, so save, load, save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::state::{ModelState, Stage};
use crate::error::{Error, Result};
use crate::tensor_core::{Parameter, Tensor};

const MAGIC: &[u8; 8] = b"WRTSAMCK";
const VERSION: u32 = 1;
const MAX_STRING: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, state: ModelState) -> Result<Self> {
        state.check_layout(&config)?;
        Ok(Checkpoint { config, state })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.push(match self.state.stage() {
            Stage::Pretrain => 0,
            Stage::Adapt => 1,
        });
        out.extend_from_slice(&(self.state.len() as u64).to_le_bytes());
        for p in self.state.params() {
            out.extend_from_slice(&(p.id.len() as u64).to_le_bytes());
            out.extend_from_slice(p.id.as_bytes());
            out.push(p.trainable as u8);
            for d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let cfg = string(&mut r)?;
        let config: ModelConfig = serde_json::from_str(&cfg).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let stage = match u8::from_le_bytes(take(&mut r)?) {
            0 => Stage::Pretrain,
            1 => Stage::Adapt,
            s => return Err(Error::Checkpoint(format!("unknown stage tag {s}"))),
        };
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let id = string(&mut r)?;
            let trainable = match u8::from_le_bytes(take(&mut r)?) {
                0 => false,
                1 => true,
                t => return Err(Error::Checkpoint(format!("bad trainable flag {t} for '{id}'"))),
            };
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = u64::from_le_bytes(take(&mut r)?) as usize;
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len
                .filter(|&l| l.saturating_mul(8) <= r.len())
                .ok_or_else(|| Error::Checkpoint(format!("parameter '{id}' shape {shape:?} exceeds the file")))?;
            let data = (0..len).map(|_| take(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, data)?;
            if params.insert(id.clone(), Parameter::new(id.clone(), value, trainable)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter '{id}'")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Checkpoint::new(config, ModelState::from_parts(params, stage))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read(r, &mut buf)?;
    Ok(buf)
}

fn string(r: &mut &[u8]) -> Result<String> {
    let len = u64::from_le_bytes(take(r)?);
    if len > MAX_STRING || len as usize > r.len() {
        return Err(Error::Checkpoint(format!("string length {len} exceeds the file")));
    }
    let mut buf = vec![0u8; len as usize];
    read(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
