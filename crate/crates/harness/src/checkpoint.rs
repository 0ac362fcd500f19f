//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "GRAFTCKPT"  u32 version
//! u32 len, spec text (UTF-8)
//! u32 tensor count
//! per tensor: u32 len, name, u32 rank, rank × u32 extent, numel × f32
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use graft::{BackboneSpec, ParamStore, Real, Tensor};

use crate::config::spec_text;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 9] = b"GRAFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Backbone section of the config that produced the parameters.
    pub spec_echo: String,
    pub tensors: Vec<TensorRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            HarnessError::Corrupt(format!("truncated at byte {} while reading {what}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| HarnessError::Corrupt(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_store<T: Real>(spec: &BackboneSpec, store: &ParamStore<T>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self { version: VERSION, spec_echo: spec_text(spec), tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut out, self.spec_echo.len());
        out.extend_from_slice(self.spec_echo.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &e in &t.shape {
                put_u32(&mut out, e);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(HarnessError::Corrupt(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(HarnessError::Corrupt("missing GRAFTCKPT header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(HarnessError::Corrupt(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(HarnessError::Incompatible(format!("format version {version}, expected {VERSION}")));
        }
        let spec_echo = r.string("spec text")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name = r.string(&format!("name of tensor {i}"))?;
            let rank = r.u32(&format!("rank of {name}"))?;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32(&format!("extents of {name}"))?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| HarnessError::Corrupt(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(bytes, &format!("values of {name}"))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(TensorRecord { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(HarnessError::Corrupt(format!("{} unread bytes before the checksum", body.len() - r.pos)));
        }
        Ok(Self { version, spec_echo, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every tensor into `store`. Names and shapes must match the
    /// store exactly, in order.
    pub fn restore<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
        let first = expected
            .iter()
            .zip(&self.tensors)
            .position(|((n, s), t)| *n != t.name || *s != t.shape.as_slice())
            .or_else(|| (expected.len() != self.tensors.len()).then_some(expected.len().min(self.tensors.len())));
        if let Some(i) = first {
            let missing: Vec<&str> =
                expected.iter().map(|(n, _)| *n).filter(|n| !self.tensors.iter().any(|t| t.name == *n)).collect();
            let extra: Vec<&str> =
                self.tensors.iter().map(|t| t.name.as_str()).filter(|n| store.id(n).is_none()).collect();
            let what = match (expected.get(i), self.tensors.get(i)) {
                (Some((n, s)), Some(t)) if *n == t.name => {
                    format!("tensor {n} has shape {:?} in the checkpoint, {s:?} expected", t.shape)
                }
                (Some((n, _)), Some(t)) => format!("tensor {i} is {} in the checkpoint, {n} expected", t.name),
                (Some((n, _)), None) => format!("checkpoint ends before tensor {n}"),
                (None, Some(t)) => format!("unexpected trailing tensor {}", t.name),
                (None, None) => unreachable!("mismatch index lies within one of the lists"),
            };
            return Err(HarnessError::Incompatible(format!("{what}; missing {missing:?}; extra {extra:?}")));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, t) in ids.into_iter().zip(&self.tensors) {
            let value = Tensor::from_vec(t.shape.clone(), t.values.iter().map(|&v| T::lit(v as f64)).collect())?;
            store.set(id, value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use graft::Model;

    fn spec() -> BackboneSpec {
        BackboneSpec::homogeneous(16, 4, 2, 8, 2, 2, 4).with_default_grafts()
    }

    fn sample() -> (Checkpoint, ParamStore<f32>) {
        let (_, store) = Model::init::<f32>(&spec(), 3).unwrap();
        (Checkpoint::from_store(&spec(), &store), store)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ck, store) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut fresh = Model::init::<f32>(&spec(), 99).unwrap().1;
        back.restore(&mut fresh).unwrap();
        for ((n1, a), (n2, b)) in store.iter().zip(fresh.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().0.to_bytes();
        assert_eq!(&bytes[..9], b"GRAFTCKPT");
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn every_truncation_is_a_corruption_error() {
        let bytes = sample().0.to_bytes();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(HarnessError::Corrupt(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_bit_fails_checksum() {
        let mut bytes = sample().0.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn different_spec_names_first_mismatch() {
        let (ck, _) = sample();
        let mut other = spec().without_grafts();
        let mut store = Model::init::<f32>(&other, 0).unwrap().1;
        let err = ck.restore(&mut store).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, HarnessError::Incompatible(_)));
        assert!(msg.contains("stages.0.blocks.1.graft"), "{msg}");

        other = spec();
        other.stage_channels = vec![16];
        let mut wide = Model::init::<f32>(&other, 0).unwrap().1;
        let msg = ck.restore(&mut wide).unwrap_err().to_string();
        assert!(msg.contains("tensor embed.proj.weight has shape"), "{msg}");
    }
}
