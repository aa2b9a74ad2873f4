//! The KSF1 tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KSF1"            4 bytes magic
//! version           u8 (currently 1)
//! entry count       u32
//! per entry:
//!   name length     u32, followed by that many UTF-8 bytes
//!   rank            u32
//!   dims            rank x u32
//!   dtype tag       u8 (1 = f32, 2 = f64)
//!   data            prod(dims) raw scalars, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{AutodiffError, DType, Real, Result};

pub const MAGIC: &[u8; 4] = b"KSF1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum KsfData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl KsfData {
    pub fn from_real<T: Real>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => KsfData::F32(values.iter().map(|v| v.to_f32().unwrap()).collect()),
            DType::F64 => KsfData::F64(values.iter().map(|v| v.to_f64().unwrap()).collect()),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            KsfData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            KsfData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            KsfData::F32(v) => v.len(),
            KsfData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            KsfData::F32(_) => DType::F32,
            KsfData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsfEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: KsfData,
}

impl KsfEntry {
    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: KsfData::F64(data),
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::f64(name, vec![1], vec![value])
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| AutodiffError::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write<W: Write>(w: &mut W, entries: &[KsfEntry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    put_u32(w, entries.len())?;
    for e in entries {
        let n: usize = e.dims.iter().product();
        if n != e.data.len() {
            return Err(AutodiffError::Format(format!(
                "entry `{}`: dims {:?} do not match {} values",
                e.name,
                e.dims,
                e.data.len()
            )));
        }
        put_u32(w, e.name.len())?;
        w.write_all(e.name.as_bytes())?;
        put_u32(w, e.dims.len())?;
        for &d in &e.dims {
            put_u32(w, d)?;
        }
        w.write_all(&[e.data.dtype() as u8])?;
        match &e.data {
            KsfData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            KsfData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

const MAX_ELEMS: usize = 1 << 31;

pub fn read<R: Read>(r: &mut R) -> Result<Vec<KsfEntry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Format("bad magic".into()));
    }
    let version = get_u8(r)?;
    if version != VERSION {
        return Err(AutodiffError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = get_u32(r)?;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = get_u32(r)?;
        if name_len > 4096 {
            return Err(AutodiffError::Format("entry name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Format("entry name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        if rank > 16 {
            return Err(AutodiffError::Format(format!("rank {rank} too large")));
        }
        let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| AutodiffError::Format(format!("entry `{name}` too large")))?;
        let data = match get_u8(r)? {
            1 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                KsfData::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                KsfData::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            t => return Err(AutodiffError::Format(format!("unknown dtype tag {t}"))),
        };
        entries.push(KsfEntry { name, dims, data });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[KsfEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<KsfEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    read(&mut r)
}

pub fn find<'a>(entries: &'a [KsfEntry], name: &str) -> Result<&'a KsfEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| AutodiffError::Format(format!("missing entry `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let e = KsfEntry {
            name: "w".into(),
            dims: vec![2],
            data: KsfData::F32(vec![1.0, -2.0]),
        };
        let mut buf = Vec::new();
        write(&mut buf, &[e]).unwrap();
        let mut expect = b"KSF1".to_vec();
        expect.push(1);
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'w');
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.push(1);
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn roundtrip_mixed() {
        let entries = vec![
            KsfEntry::f64("a.b", vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()),
            KsfEntry {
                name: "ü".into(),
                dims: vec![1],
                data: KsfData::F32(vec![f32::MIN_POSITIVE]),
            },
        ];
        let mut buf = Vec::new();
        write(&mut buf, &entries).unwrap();
        assert_eq!(read(&mut buf.as_slice()).unwrap(), entries);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read(&mut &b"KSF2\x01\0\0\0\0"[..]).is_err());
        assert!(read(&mut &b"KSF1\x07\0\0\0\0"[..]).is_err());
        // truncated payload
        let mut buf = Vec::new();
        write(&mut buf, &[KsfEntry::scalar("x", 1.0)]).unwrap();
        buf.pop();
        assert!(read(&mut buf.as_slice()).is_err());
    }
}
