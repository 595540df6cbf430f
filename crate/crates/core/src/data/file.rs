//! `OIFG` feature files.
//!
//! Layout, all little-endian: magic `OIFG`, version `u32`, grid count `u32`,
//! then per grid `H u32, W u32, d u32`, `H*W*d` `f64` features and `H*W`
//! `u32` labels.

use std::fs;
use std::path::Path;

use super::FeatureGrid;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"OIFG";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_feature_grids(grids: &[FeatureGrid]) -> Vec<u8> {
    let payload: usize = grids
        .iter()
        .map(|g| 12 + g.features().len() * 8 + g.labels().len() * 4)
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(grids.len() as u32).to_le_bytes());
    for g in grids {
        for n in [g.height(), g.width(), g.dim()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for x in g.features() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for l in g.labels() {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_feature_grids(bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(r.error_at(0, "bad magic, expected OIFG"));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut grids: Vec<FeatureGrid> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let header_at = r.offset();
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let d = r.u32()? as usize;
        if let Some(first) = grids.first() {
            if first.dim() != d {
                return Err(Error::DimMismatch {
                    expected: first.dim(),
                    found: d,
                });
            }
        }
        let pixels = h
            .checked_mul(w)
            .ok_or_else(|| r.error_at(header_at, "grid size overflows"))?;
        let n_feat = pixels
            .checked_mul(d)
            .ok_or_else(|| r.error_at(header_at, "feature count overflows"))?;
        let features = r.f64s(n_feat)?;
        let labels = r.u32s(pixels)?;
        grids.push(
            FeatureGrid::new(h, w, d, features, labels)
                .map_err(|e| r.error_at(header_at, &e.to_string()))?,
        );
    }
    if r.remaining() != 0 {
        return Err(r.error_at(r.offset(), "trailing bytes after last grid"));
    }
    Ok(grids)
}

pub fn save_feature_file(path: impl AsRef<Path>, grids: &[FeatureGrid]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_grids(grids)).map_err(|e| Error::io(path, e))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<Vec<FeatureGrid>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_grids(&bytes)
}

/// Little-endian cursor that reports truncation with the failing offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error_at(&self, offset: usize, reason: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos,
                &format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.error_at(self.pos, "length overflows"))?,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.error_at(self.pos, "length overflows"))?,
        )?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dim: usize, seed: f64) -> FeatureGrid {
        let feats = (0..4 * dim).map(|i| seed + i as f64 * 0.25).collect();
        FeatureGrid::new(2, 2, dim, feats, vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let grids = vec![grid(3, -1.5), grid(3, f64::MIN_POSITIVE)];
        let bytes = encode_feature_grids(&grids);
        assert_eq!(&bytes[..4], b"OIFG");
        let back = decode_feature_grids(&bytes).unwrap();
        assert_eq!(back, grids);
        assert_eq!(encode_feature_grids(&back), bytes);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = encode_feature_grids(&[grid(3, 0.0)]);
        let cut = &bytes[..bytes.len() - 3];
        match decode_feature_grids(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            decode_feature_grids(&bytes[..2]),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn mixed_dims_rejected() {
        let mut bytes = encode_feature_grids(&[grid(16, 0.0)]);
        let second = encode_feature_grids(&[grid(32, 0.0)]);
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&second[12..]);
        assert!(matches!(
            decode_feature_grids(&bytes),
            Err(Error::DimMismatch {
                expected: 16,
                found: 32
            })
        ));
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode_feature_grids(&[grid(2, 0.0)]);
        bytes[4] = 9;
        assert!(matches!(
            decode_feature_grids(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_feature_grids(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
