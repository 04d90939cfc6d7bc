//! Binary sample shard, all integers little-endian:
//!
//! ```text
//! "BUSD" | version u16 | count u32
//! per sample: seed u64 | H u16 | W u16 | H·W·3 RGB bytes
//!             | caption len u16 | ids u16… | has_box u8 | x,y,w,h u16
//!             | label len u16 | label bytes
//! ```

use std::fs;
use std::path::Path;

use super::SynthSample;
use crate::error::{data, Error, Result};
use crate::objectives::BoundingBox;

pub const SHARD_MAGIC: &[u8; 4] = b"BUSD";
pub const SHARD_VERSION: u16 = 1;

fn to_u16(what: &str, v: i64) -> Result<u16> {
    u16::try_from(v).map_err(|_| data(format!("{what}={v} does not fit the shard's u16 field")))
}

pub fn encode_shard(samples: &[SynthSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    let count = u32::try_from(samples.len()).map_err(|_| data("too many samples for one shard"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        let expected = s.height as usize * s.width as usize * 3;
        if s.pixels.len() != expected {
            return Err(data(format!("sample {} has {} pixel bytes, expected {expected}", s.seed, s.pixels.len())));
        }
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&s.height.to_le_bytes());
        out.extend_from_slice(&s.width.to_le_bytes());
        out.extend_from_slice(&s.pixels);
        out.extend_from_slice(&to_u16("caption length", s.caption.len() as i64)?.to_le_bytes());
        for &id in &s.caption {
            out.extend_from_slice(&to_u16("token id", id as i64)?.to_le_bytes());
        }
        match &s.bbox {
            Some(b) => {
                out.push(1);
                for (name, v) in [("x", b.x), ("y", b.y), ("w", b.w), ("h", b.h)] {
                    out.extend_from_slice(&to_u16(name, v)?.to_le_bytes());
                }
            }
            None => {
                out.push(0);
                out.extend_from_slice(&[0u8; 8]);
            }
        }
        out.extend_from_slice(&to_u16("label length", s.label.len() as i64)?.to_le_bytes());
        out.extend_from_slice(s.label.as_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, at: usize, msg: String) -> Error {
        Error::Format { offset: at as u64, msg }
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<SynthSample>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != SHARD_MAGIC {
        return Err(c.fail(0, format!("bad magic {magic:?}, expected \"BUSD\"")));
    }
    let version = c.u16("version")?;
    if version != SHARD_VERSION {
        return Err(c.fail(4, format!("unsupported shard version {version}")));
    }
    let count = c.u32("sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let seed = c.u64("seed")?;
        let height = c.u16("height")?;
        let width = c.u16("width")?;
        let pixels = c.take(height as usize * width as usize * 3, "pixels")?.to_vec();
        let len = c.u16("caption length")?;
        let caption = (0..len).map(|_| c.u16("token id").map(usize::from)).collect::<Result<Vec<_>>>()?;
        let flag_at = c.pos;
        let has_box = c.u8("box flag")?;
        let coords = [c.u16("box x")?, c.u16("box y")?, c.u16("box w")?, c.u16("box h")?].map(i64::from);
        let bbox = match has_box {
            0 => None,
            1 => Some(BoundingBox::new(coords[0], coords[1], coords[2], coords[3])),
            other => return Err(c.fail(flag_at, format!("box flag must be 0 or 1, got {other}"))),
        };
        let label_len = c.u16("label length")?;
        let label_at = c.pos;
        let label = String::from_utf8(c.take(label_len as usize, "label")?.to_vec())
            .map_err(|_| c.fail(label_at, "label is not UTF-8".into()))?;
        samples.push(SynthSample { seed, height, width, pixels, caption, bbox, label });
    }
    if c.pos != bytes.len() {
        return Err(c.fail(c.pos, format!("{} trailing bytes after the last sample", bytes.len() - c.pos)));
    }
    Ok(samples)
}

pub fn write_shard(path: &Path, samples: &[SynthSample]) -> Result<()> {
    fs::write(path, encode_shard(samples)?)?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<SynthSample>> {
    decode_shard(&fs::read(path)?)
}
