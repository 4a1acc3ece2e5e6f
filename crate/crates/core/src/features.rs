//! Labeled embeddings extracted by one model version, and the `FSET` binary
//! container.
//!
//! Layout (little-endian): magic `FSET`, version `u32 = 1`, `dim: u32`,
//! `count: u64`, model id as `u32` byte length + UTF-8, then `count` records of
//! `label: u32` followed by `dim` `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FSET_MAGIC: &[u8; 4] = b"FSET";
pub const FSET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub label: u32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub model_id: String,
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        Self {
            model_id: model_id.into(),
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, label: u32, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        self.records.push(FeatureRecord { label, vector });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.records.iter().map(|r| r.label)
    }

    /// Keeps the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            model_id: self.model_id.clone(),
            dim: self.dim,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Fraction of vectors with Euclidean norm above `eps`.
    pub fn nonzero_fraction(&self, eps: f32) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let n = self
            .records
            .iter()
            .filter(|r| r.vector.iter().map(|v| v * v).sum::<f32>().sqrt() > eps)
            .count();
        n as f64 / self.records.len() as f64
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let id = self.model_id.as_bytes();
        w.write_all(FSET_MAGIC)?;
        w.write_all(&FSET_VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.dim)?.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&u32_of(id.len())?.to_le_bytes())?;
        w.write_all(id)?;
        let mut buf = Vec::with_capacity(4 + 4 * self.dim);
        for r in &self.records {
            buf.clear();
            buf.extend_from_slice(&r.label.to_le_bytes());
            for v in &r.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FSET_MAGIC {
            return Err(Error::Format("bad FSET magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FSET_VERSION {
            return Err(Error::Format(format!("unsupported FSET version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let model_id =
            String::from_utf8(id).map_err(|_| Error::Format("model id is not UTF-8".into()))?;
        let mut records = Vec::new();
        let mut buf = vec![0u8; 4 * dim];
        for _ in 0..count {
            let label = read_u32(&mut r)?;
            r.read_exact(&mut buf)?;
            let vector = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(FeatureRecord { label, vector });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after FSET records".into()));
        }
        Ok(Self {
            model_id,
            dim,
            records,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut fs = FeatureSet::new("m1", 2);
        fs.push(7, vec![1.0, -2.5]).unwrap();
        let b = fs.to_bytes();
        assert_eq!(&b[0..4], b"FSET");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 2);
        assert_eq!(&b[24..26], b"m1");
        assert_eq!(u32::from_le_bytes(b[26..30].try_into().unwrap()), 7);
        assert_eq!(f32::from_le_bytes(b[30..34].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 38);
    }

    #[test]
    fn rejects_corruption() {
        let mut fs = FeatureSet::new("m", 1);
        fs.push(0, vec![0.5]).unwrap();
        let mut b = fs.to_bytes();
        b[0] = b'X';
        assert!(FeatureSet::read_from(b.as_slice()).is_err());
        let mut b = fs.to_bytes();
        b.push(0);
        assert!(FeatureSet::read_from(b.as_slice()).is_err());
        let b = fs.to_bytes();
        assert!(FeatureSet::read_from(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn push_checks_dim() {
        let mut fs = FeatureSet::new("m", 3);
        assert!(fs.push(0, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn fset_round_trip(
            id in "[a-z0-9_/-]{0,16}",
            dim in 0usize..6,
            rows in prop::collection::vec((any::<u32>(), prop::collection::vec(-1e6f32..1e6, 6)), 0..20),
        ) {
            let mut fs = FeatureSet::new(id, dim);
            for (l, v) in rows {
                fs.push(l, v[..dim].to_vec()).unwrap();
            }
            let back = FeatureSet::read_from(fs.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, fs);
        }
    }
}
