//! `SSNC` checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SSNC" | u32 version | u32 len | TOML metadata (len bytes)
//! u32 count | count x (u32 name len | name | u32 rank | u32 dims.. | f32 data..)
//! ```
//!
//! Tensors are stored as 32-bit floats, so saving a loaded checkpoint
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::params::{Adam, ParamStore};
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSNC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    pl_mean: f64,
    adam_g_t: u64,
    adam_d_t: u64,
    config: TrainConfig,
}

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn named<'a>(prefix: &str, store: &'a ParamStore) -> impl Iterator<Item = (String, Tensor)> + 'a {
    let prefix = prefix.to_string();
    store.iter().map(move |(k, t)| (format!("{prefix}{k}"), t.clone()))
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let meta = Meta {
        step: state.step,
        pl_mean: state.pl_mean,
        adam_g_t: state.adam_g.t,
        adam_d_t: state.adam_d.t,
        config: state.config.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    let tensors: Vec<(String, Tensor)> = named("", &state.g)
        .chain(named("", &state.d))
        .chain(named("opt.g.m.", &state.adam_g.m))
        .chain(named("opt.g.v.", &state.adam_g.v))
        .chain(named("opt.d.m.", &state.adam_d.m))
        .chain(named("opt.d.v.", &state.adam_d.v))
        .collect();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an SSNC checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta: Meta = toml::from_str(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
    meta.config.validate()?;
    let mut state = TrainState {
        config: meta.config,
        g: ParamStore::new(),
        d: ParamStore::new(),
        adam_g: Adam {
            t: meta.adam_g_t,
            ..Default::default()
        },
        adam_d: Adam {
            t: meta.adam_d_t,
            ..Default::default()
        },
        step: meta.step,
        pl_mean: meta.pl_mean,
    };
    let count = r.u32()?;
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::from_vec(&shape, data)?;
        let (store, key) = if let Some(k) = name.strip_prefix("opt.g.m.") {
            (&mut state.adam_g.m, k)
        } else if let Some(k) = name.strip_prefix("opt.g.v.") {
            (&mut state.adam_g.v, k)
        } else if let Some(k) = name.strip_prefix("opt.d.m.") {
            (&mut state.adam_d.m, k)
        } else if let Some(k) = name.strip_prefix("opt.d.v.") {
            (&mut state.adam_d.v, k)
        } else if name.starts_with("g.") {
            (&mut state.g, name.as_str())
        } else if name.starts_with("d.") {
            (&mut state.d, name.as_str())
        } else {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        };
        store.insert(key, t);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    let expected = TrainState::new(state.config.clone())?;
    for (store, want) in [(&state.g, &expected.g), (&state.d, &expected.d)] {
        for (k, t) in want.iter() {
            match store.get(k) {
                Some(got) if got.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("missing or misshapen parameter {k}"))),
            }
        }
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}
