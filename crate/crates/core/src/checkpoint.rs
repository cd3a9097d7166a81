//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "IM2TEXCK"
//! version  u32      1
//! n_meta   u32
//!   key    u32 length + UTF-8
//!   value  u32 length + UTF-8
//! n_params u32
//!   name       u32 length + UTF-8
//!   trainable  u8
//!   ndim       u32, then ndim × u64 dims
//!   values     f64 × prod(dims)
//!   moments    u8 (0 | 1), then m and v as f64 × prod(dims) when 1
//! ```
//!
//! Metadata carries the run configuration, the vocabulary and trainer state.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{Moments, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IM2TEXCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            what: "checkpoint",
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} more bytes"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            what: "checkpoint",
            offset: at,
            msg: "invalid UTF-8".into(),
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Invalid("tensor too large".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_str(&mut out, &p.name);
            out.push(u8::from(p.trainable));
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
            match &p.moments {
                Some(m) => {
                    out.push(1);
                    put_f64s(&mut out, &m.m);
                    put_f64s(&mut out, &m.v);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            r.pos = 0;
            return r.fail("bad magic");
        }
        let version = r.u32()?;
        if version != VERSION {
            r.pos -= 4;
            return r.fail(format!("unsupported version {version}"));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let at = r.pos;
            let name = r.str()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return r.fail(format!("trainable flag {b}")),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is too large")))?;
            let value = Tensor::new(shape, r.f64s(n)?).map_err(|e| e.context(format!("parameter `{name}`")))?;
            let moments = match r.u8()? {
                0 => None,
                1 => Some(Moments {
                    m: r.f64s(n)?,
                    v: r.f64s(n)?,
                }),
                b => return r.fail(format!("moments flag {b}")),
            };
            let id = params.add(name, value, trainable).map_err(|e| Error::Format {
                what: "checkpoint",
                offset: at,
                msg: e.to_string(),
            })?;
            params.get_mut(id).moments = moments;
        }
        if r.pos != bytes.len() {
            return r.fail("trailing bytes");
        }
        Ok(Checkpoint { meta, params })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// existing checkpoint survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}` entry")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        let a = store
            .add("a", Tensor::new([2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(), true)
            .unwrap();
        store.get_mut(a).moments = Some(Moments {
            m: vec![0.1, 0.2, 0.3, 0.4],
            v: vec![1.0, 2.0, 3.0, 4.0],
        });
        store.add("bn.running_mean", Tensor::zeros([3]), false).unwrap();
        let mut c = Checkpoint::new(store);
        c.meta.insert("trainer.step".into(), "17".into());
        c.meta.insert("config".into(), "beam = 5\n".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.meta, c.meta);
        for (x, y) in back.params.iter().zip(c.params.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.trainable, y.trainable);
            let bx: Vec<u64> = x.value.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
            assert_eq!(x.moments, y.moments);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().encode(), c.encode());
    }
}
