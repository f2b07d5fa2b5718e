//! Binary feature-map files, for supplying externally computed features.
//!
//! Layout (all integers `u32`, all values little-endian):
//!
//! | offset | content |
//! |---|---|
//! | 0 | magic `b"CFMP"` |
//! | 4 | version (`1`) |
//! | 8 | H |
//! | 12 | W |
//! | 16 | D |
//! | 20 | item count N |
//! | 24 | N records: depth (`u32`, must equal D) then `H·W·D` `f32`, positions row-major, channels fastest |
//! | end − 4N | N labels (`u32`) |
//!
//! Invalid positions are written as zero vectors. Vectors are re-normalized on import.

use std::path::Path;

use crate::backbone::FeatureMap;
use crate::error::{ensure, Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CFMP";
pub const FEATURE_VERSION: u32 = 1;
/// Norm below which an imported vector is flagged invalid.
pub const IMPORT_EPSILON: f64 = 1e-6;

pub fn encode_feature_maps(items: &[(FeatureMap, usize)]) -> Result<Vec<u8>> {
    let (h, w, d) = items.first().map(|(m, _)| (m.height(), m.width(), m.depth())).unwrap_or((0, 0, 0));
    let mut out = Vec::with_capacity(24 + items.len() * (4 + 4 * h * w * d + 4));
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION as usize, h, w, d, items.len()] {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for (n, (m, _)) in items.iter().enumerate() {
        ensure!(
            (m.height(), m.width(), m.depth()) == (h, w, d),
            DimensionMismatch,
            "item {n} is {}x{}x{}, expected {h}x{w}x{d}",
            m.height(),
            m.width(),
            m.depth()
        );
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
        for &v in m.raw() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for (_, y) in items {
        out.extend_from_slice(&to_u32(*y)?.to_le_bytes());
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit the feature file header")))
}

pub fn export_feature_maps(path: impl AsRef<Path>, items: &[(FeatureMap, usize)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_maps(items)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated at byte {} (needed {n} more of {})", self.pos, self.bytes.len())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a feature file; `path` is only used in error messages.
pub fn decode_feature_maps(bytes: &[u8], path: &Path) -> Result<Vec<(FeatureMap, usize)>> {
    let bad = |reason: String| Error::malformed(path, reason);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(bad)? != FEATURE_MAGIC {
        return Err(bad("missing CFMP magic".into()));
    }
    let version = r.u32().map_err(bad)?;
    if version != FEATURE_VERSION as usize {
        return Err(bad(format!("unsupported feature file version {version}")));
    }
    let (h, w, d, count) = (r.u32().map_err(bad)?, r.u32().map_err(bad)?, r.u32().map_err(bad)?, r.u32().map_err(bad)?);
    if count > 0 && (h == 0 || w == 0 || d == 0) {
        return Err(bad(format!("empty item shape {h}x{w}x{d}")));
    }
    let per_item = h.checked_mul(w).and_then(|x| x.checked_mul(d)).ok_or_else(|| bad("item shape overflows".into()))?;
    let mut maps = Vec::with_capacity(count);
    for n in 0..count {
        let depth = r.u32().map_err(bad)?;
        if depth != d {
            return Err(bad(format!("item {n} has depth {depth}, header says {d}")));
        }
        let raw = r.take(per_item * 4).map_err(bad)?;
        let data: Vec<f64> = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
        maps.push(FeatureMap::from_raw(h, w, d, data, IMPORT_EPSILON).map_err(|e| bad(e.to_string()))?);
    }
    let mut out = Vec::with_capacity(count);
    for m in maps {
        out.push((m, r.u32().map_err(bad)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn import_feature_maps(path: impl AsRef<Path>) -> Result<Vec<(FeatureMap, usize)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_maps(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(d: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::from_raw(1, 2, d, data, 1e-9).unwrap()
    }

    #[test]
    fn round_trip() {
        let items = vec![(map(2, vec![0.6, 0.8, 0.0, 0.0]), 3), (map(2, vec![1.0, 0.0, 0.0, 1.0]), 0)];
        let bytes = encode_feature_maps(&items).unwrap();
        assert_eq!(&bytes[..4], b"CFMP");
        let back = decode_feature_maps(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, 3);
        assert!(!back[0].0.is_valid(1));
        for ((a, _), (b, _)) in items.iter().zip(&back) {
            for (x, y) in a.raw().iter().zip(b.raw()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mixed_depth_rejected() {
        let mut bytes = encode_feature_maps(&[(map(2, vec![1.0, 0.0, 0.0, 1.0]), 0), (map(2, vec![1.0, 0.0, 0.0, 1.0]), 1)]).unwrap();
        let second = 24 + 4 + 4 * 4;
        bytes[second..second + 4].copy_from_slice(&3u32.to_le_bytes());
        assert!(decode_feature_maps(&bytes, Path::new("mem")).is_err());
    }

    #[test]
    fn non_unit_vectors_normalized() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CFMP");
        for v in [1u32, 1, 1, 2, 1, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [3.0f32, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&7u32.to_le_bytes());
        let items = decode_feature_maps(&bytes, Path::new("mem")).unwrap();
        let v = items[0].0.vector(0).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        assert_eq!(items[0].1, 7);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = encode_feature_maps(&[(map(2, vec![1.0, 0.0, 0.0, 1.0]), 0)]).unwrap();
        assert!(decode_feature_maps(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(decode_feature_maps(&b, Path::new("mem")).is_err());
    }
}
