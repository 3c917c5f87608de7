//! Map file: `"ATDNMAP1" | version u32 | D u32 | count u64 | fingerprint [u8; 32]
//! | count × (frame_id u64 | pose 12 × f64 | embedding D × f32) | crc32 u32`,
//! little-endian. The checksum covers every preceding byte.

use std::io::{Cursor, Read, Write};

use super::{EmbeddingMap, KeyframeRecord, RelocError};
use crate::binio::{self, DEFAULT_MAX_BYTES};
use crate::geometry::Pose;

pub const MAP_MAGIC: &[u8; 8] = b"ATDNMAP1";
pub const MAP_VERSION: u32 = 1;

const HEADER_BYTES: u64 = 8 + 4 + 4 + 8 + 32;

pub fn save_map(map: &EmbeddingMap, w: &mut impl Write) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(HEADER_BYTES as usize + map.len() * (104 + 4 * map.dim()) + 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&MAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    out.extend_from_slice(map.fingerprint());
    for r in map.records() {
        out.extend_from_slice(&r.frame_id.to_le_bytes());
        for v in r.pose.to_row_major_3x4() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        binio::write_f32_slice(&mut out, &r.embedding)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&out)
}

/// Reads and verifies a map. Pass the fingerprint of the model that will
/// embed queries to reject maps built by another model.
pub fn load_map(r: &mut impl Read, expected: Option<&[u8; 32]>) -> Result<EmbeddingMap, RelocError> {
    load_map_with_limit(r, expected, DEFAULT_MAX_BYTES)
}

pub fn load_map_with_limit(
    r: &mut impl Read,
    expected: Option<&[u8; 32]>,
    max_bytes: u64,
) -> Result<EmbeddingMap, RelocError> {
    let header: [u8; HEADER_BYTES as usize] = binio::read_array(r)?;
    let mut h = Cursor::new(&header[..]);
    if &binio::read_array::<8>(&mut h)? != MAP_MAGIC {
        return Err(RelocError::BadMagic);
    }
    let version = binio::read_u32(&mut h)?;
    if version != MAP_VERSION {
        return Err(RelocError::UnsupportedVersion(version));
    }
    let dim = binio::read_u32(&mut h)? as u64;
    let count = binio::read_u64(&mut h)?;
    let fingerprint: [u8; 32] = binio::read_array(&mut h)?;
    let record_bytes = 8u64.saturating_add(96).saturating_add(dim.saturating_mul(4));
    let body = count.saturating_mul(record_bytes).saturating_add(4);
    if body.saturating_add(HEADER_BYTES) > max_bytes {
        return Err(RelocError::Oversized { cap: max_bytes });
    }
    let mut payload = vec![0u8; body as usize];
    r.read_exact(&mut payload)?;
    let (records_bytes, crc_bytes) = payload.split_at(payload.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header);
    hasher.update(records_bytes);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(RelocError::ChecksumMismatch { stored, computed });
    }
    if expected.is_some_and(|e| *e != fingerprint) {
        return Err(RelocError::FingerprintMismatch);
    }
    let mut c = Cursor::new(records_bytes);
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let frame_id = binio::read_u64(&mut c)?;
        let mut values = [0.0f64; 12];
        for v in &mut values {
            *v = binio::read_f64(&mut c)?;
        }
        let pose = Pose::from_row_major_3x4(&values).map_err(|_| RelocError::InvalidPose(frame_id))?;
        let embedding = binio::read_f32_vec(&mut c, dim as usize)?;
        records.push(KeyframeRecord {
            frame_id,
            embedding,
            pose,
        });
    }
    EmbeddingMap::new(records, fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn sample(n: usize, d: usize) -> EmbeddingMap {
        let records = (0..n)
            .map(|k| KeyframeRecord {
                frame_id: 3 * k as u64,
                embedding: (0..d).map(|j| (k * d + j) as f32 * 0.37 - 1.0).collect(),
                pose: Pose::yaw(0.01 * k as f64, Vector3::new(k as f64, 0.5, -0.25)),
            })
            .collect();
        EmbeddingMap::new(records, [0xab; 32]).unwrap()
    }

    fn bytes(map: &EmbeddingMap) -> Vec<u8> {
        let mut out = Vec::new();
        save_map(map, &mut out).unwrap();
        out
    }

    #[test]
    fn round_trip() {
        let map = sample(3, 4);
        let b = bytes(&map);
        assert_eq!(b.len(), 56 + 3 * (104 + 16) + 4);
        let back = load_map(&mut b.as_slice(), Some(&[0xab; 32])).unwrap();
        assert_eq!(back, map);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn detects_corruption() {
        let b = bytes(&sample(3, 4));
        let mut bad = b.clone();
        bad[30] ^= 1;
        assert!(matches!(load_map(&mut bad.as_slice(), None), Err(RelocError::ChecksumMismatch { .. })));
        assert!(matches!(load_map(&mut &b[..b.len() - 1], None), Err(RelocError::Truncated)));
        assert!(matches!(load_map(&mut &b[..20], None), Err(RelocError::Truncated)));
        assert!(matches!(load_map(&mut b.as_slice(), Some(&[0; 32])), Err(RelocError::FingerprintMismatch)));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(load_map(&mut magic.as_slice(), None), Err(RelocError::BadMagic)));
    }

    #[test]
    fn size_cap() {
        let mut b = bytes(&sample(1, 2));
        b[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(load_map(&mut b.as_slice(), None), Err(RelocError::Oversized { .. })));
    }
}
