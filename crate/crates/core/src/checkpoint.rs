//! Flat binary tensor container, little-endian throughout:
//!
//! ```text
//! "BUSW" | version u16 | count u32
//! per tensor: name len u32 | name bytes | rank u32 | extents u64… | f64…
//! ```
//!
//! Model checkpoints store every parameter under its own name; training
//! state rides along as extra `state.*` and `optim.*` tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::schedule::TrainState;

pub const MAGIC: &[u8; 4] = b"BUSW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() - *pos < n {
        return Err(Error::Format { offset: *pos as u64, msg: format!("truncated while reading {what}") });
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut pos = 0;
    if take(buf, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected \"BUSW\"".into() });
    }
    let version = u16::from_le_bytes(take(buf, &mut pos, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = u32::from_le_bytes(take(buf, &mut pos, 4, "tensor count")?.try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(buf, &mut pos, 4, "name length")?.try_into().unwrap()) as usize;
        let at = pos;
        let name = String::from_utf8(take(buf, &mut pos, len, "name")?.to_vec())
            .map_err(|_| Error::Format { offset: at as u64, msg: "tensor name is not UTF-8".into() })?;
        let rank = u32::from_le_bytes(take(buf, &mut pos, 4, "rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(buf, &mut pos, 8, "extent")?.try_into().unwrap()) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format { offset: pos as u64, msg: format!("extents of '{name}' overflow") })?;
        let bytes = take(buf, &mut pos, numel.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedTensor { name, shape, data });
    }
    if pos != buf.len() {
        return Err(Error::Format { offset: pos as u64, msg: "trailing bytes".into() });
    }
    Ok(out)
}

/// Parameters (and optionally training state) as named tensors.
pub fn collect(model: &Model, state: Option<&TrainState>) -> Vec<NamedTensor> {
    let mut out: Vec<NamedTensor> = model
        .params()
        .iter()
        .map(|p| {
            let t = p.get();
            NamedTensor { name: p.name().to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() }
        })
        .collect();
    if let Some(s) = state {
        let scalars = vec![
            s.step as f64,
            s.epoch as f64,
            s.beta,
            s.ptm_ema.unwrap_or(f64::NAN),
            s.gate_opened_at.map_or(-1.0, |g| g as f64),
        ];
        out.push(NamedTensor { name: "state.scalars".into(), shape: vec![scalars.len()], data: scalars });
        for (p, (m, v)) in model.params().iter().zip(&s.moments) {
            out.push(NamedTensor { name: format!("optim.m.{}", p.name()), shape: vec![m.len()], data: m.clone() });
            out.push(NamedTensor { name: format!("optim.v.{}", p.name()), shape: vec![v.len()], data: v.clone() });
        }
    }
    out
}

pub fn save(path: &Path, model: &Model, state: Option<&TrainState>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(&collect(model, state)))?;
    Ok(())
}

/// Loads parameters into `model`; returns the training state if present.
pub fn load(path: &Path, model: &Model) -> Result<Option<TrainState>> {
    let tensors = decode(&fs::read(path)?)?;
    let find = |name: &str| tensors.iter().find(|t| t.name == name);
    for p in model.params().iter() {
        let t = find(p.name()).ok_or_else(|| Error::State(format!("checkpoint lacks parameter '{}'", p.name())))?;
        if t.shape != p.shape() {
            return Err(Error::State(format!("parameter '{}' has shape {:?}, checkpoint {:?}", p.name(), p.shape(), t.shape)));
        }
        p.set_data(t.data.clone())?;
    }
    let Some(sc) = find("state.scalars") else {
        return Ok(None);
    };
    let mut state = TrainState::new(model.params());
    state.step = sc.data[0] as usize;
    state.epoch = sc.data[1] as usize;
    state.beta = sc.data[2];
    state.ptm_ema = (!sc.data[3].is_nan()).then_some(sc.data[3]);
    state.gate_opened_at = (sc.data[4] >= 0.0).then_some(sc.data[4] as usize);
    for (p, (m, v)) in model.params().iter().zip(state.moments.iter_mut()) {
        let missing = || Error::State(format!("checkpoint lacks optimizer moments for '{}'", p.name()));
        *m = find(&format!("optim.m.{}", p.name())).ok_or_else(missing)?.data.clone();
        *v = find(&format!("optim.v.{}", p.name())).ok_or_else(missing)?.data.clone();
    }
    Ok(Some(state))
}
