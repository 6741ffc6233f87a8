//! CLTF tensor files and named-tensor containers.
//!
//! Single tensor layout (all integers little-endian):
//!
//! ```text
//! b"CLTF"  u32 version=1  u32 rank  u64 dims[rank]  f32 payload[prod(dims)]
//! ```
//!
//! A container starts with `b"CLTC"  u32 version=1  u32 count` followed by
//! `count` records, each `u16 name_len, name bytes (UTF-8), <tensor>` where
//! `<tensor>` is the single tensor layout above.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CLTF";
pub const CONTAINER_MAGIC: &[u8; 4] = b"CLTC";
pub const VERSION: u32 = 1;

/// Dense row-major `f32` tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(StoredTensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        StoredTensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn encode_tensor(t: &StoredTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(4 * t.data.len());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::TensorFormat {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.err(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<StoredTensor> {
        self.magic(TENSOR_MAGIC)?;
        let rank = self.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = self.u64("dims")?;
            dims.push(usize::try_from(d).map_err(|_| self.err("dimension overflows usize"))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err("element count overflows"))?;
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.err("payload size overflows"))?;
        let payload = self.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(StoredTensor { dims, data })
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<StoredTensor> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &StoredTensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn encode_container(records: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        if !seen.insert(name.as_str()) {
            return Err(Error::Invalid(format!("duplicate tensor name `{name}`")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    r.magic(CONTAINER_MAGIC)?;
    let count = r.u32("record count")? as usize;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err("record name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(r.err(format!("duplicate record `{name}`")));
        }
        let t = r.tensor()?;
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn write_container(path: &Path, records: &[(String, StoredTensor)]) -> Result<()> {
    let buf = encode_container(records)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn hand_encoded_layout() {
        let t = StoredTensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let expected: Vec<u8> = [
            &b"CLTF"[..],
            &[1, 0, 0, 0],
            &[1, 0, 0, 0],
            &[2, 0, 0, 0, 0, 0, 0, 0],
            &[0x00, 0x00, 0x80, 0x3f],
            &[0x00, 0x00, 0x00, 0xc0],
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = StoredTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad, p()), Err(Error::TensorFormat { .. })));
        assert!(decode_tensor(&buf[..buf.len() - 1], p()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(decode_tensor(&long, p()).is_err());
    }

    #[test]
    fn container_rejects_duplicates() {
        let t = StoredTensor::new(vec![1], vec![0.5]).unwrap();
        assert!(encode_container(&[("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip(entries in proptest::collection::vec(
            (proptest::collection::vec(1usize..4, 0..4), any::<u32>()), 0..6)) {
            let records: Vec<(String, StoredTensor)> = entries
                .iter()
                .enumerate()
                .map(|(i, (dims, seed))| {
                    let n: usize = dims.iter().product();
                    let data = (0..n).map(|k| f32::from_bits(seed.wrapping_add(k as u32) % 0x7f00_0000)).collect();
                    (format!("t{i}"), StoredTensor::new(dims.clone(), data).unwrap())
                })
                .collect();
            let buf = encode_container(&records).unwrap();
            let back = decode_container(&buf, p()).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&records) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&t1.dims, &t2.dims);
                let b1: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
