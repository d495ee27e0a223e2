//! Single-file binary container used for checkpoints and bundled arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ACFSEVC\0" | u32 version | u64 len, JSON metadata
//! | u64 array count | per array: u64 len, name | u64 ndim, u64 dims.. | u64 n, f64 values..
//! | SHA-256 of everything above
//! ```

use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 8] = b"ACFSEVC\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            bail!(Shape, "array '{}' has {} values for shape {:?}", name, data.len(), shape);
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("container has no array '{name}'")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(
            64 + meta.len() + self.arrays.iter().map(|a| 8 * a.data.len() + a.name.len() + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u64(&mut out, meta.len());
        out.extend_from_slice(&meta);
        put_u64(&mut out, self.arrays.len());
        for a in &self.arrays {
            put_u64(&mut out, a.name.len());
            out.extend_from_slice(a.name.as_bytes());
            put_u64(&mut out, a.shape.len());
            for &d in &a.shape {
                put_u64(&mut out, d);
            }
            put_u64(&mut out, a.data.len());
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 4;
        if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
            bail!(Format, "not a container file (bad magic bytes)");
        }
        let version = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < header + DIGEST_LEN {
            bail!(Integrity, "container truncated to {} bytes", bytes.len());
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            bail!(Integrity, "container checksum mismatch (file corrupted or truncated)");
        }

        let mut r = Reader { bytes: body, pos: header };
        let meta_len = r.len()?;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.len()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = r.len()?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray::new(name, shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        if r.pos != body.len() {
            bail!(Format, "{} trailing bytes after the last array", body.len() - r.pos);
        }
        Ok(Self { metadata, arrays })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("container field runs past the end of the file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let raw = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(raw).map_err(|_| Error::Format("length field overflows".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"kind": "test", "seed": 7}));
        c.push(NamedArray::new("w", vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -2.25]).unwrap());
        c.push(NamedArray::new("empty", vec![0], vec![]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for (a, b) in back.arrays.iter().zip(&c.arrays) {
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = sample().encode().unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        assert!(matches!(Container::decode(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().encode().unwrap();
        bytes[8..12].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            Container::decode(&bytes),
            Err(Error::Version { found: 999, expected: 1 })
        ));
        assert!(matches!(Container::decode(b"garbage!garbage"), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        sample().save(&path).unwrap();
        assert_eq!(Container::load(&path).unwrap(), sample());
        assert!(Container::load(&dir.path().join("missing.bin")).is_err());
        assert!(NamedArray::new("x", vec![2], vec![1.0]).is_err());
    }
}
