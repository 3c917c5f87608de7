//! Flow file: `"ATDNFLOW" | version u32 | H u32 | W u32 | H·W·2 f32`, little-endian,
//! channel-last, row-major.

use std::io::{Read, Write};

use super::{DataError, FlowField};
use crate::binio::{self, DEFAULT_MAX_BYTES};

pub const FLOW_MAGIC: &[u8; 8] = b"ATDNFLOW";
pub const FLOW_VERSION: u32 = 1;

/// Writes `field` and returns the number of bytes emitted.
pub fn write_flow(field: &FlowField, sink: &mut impl Write) -> std::io::Result<u64> {
    let mut buf = Vec::with_capacity(20 + field.data().len() * 4);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(field.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(field.width() as u32).to_le_bytes());
    binio::write_f32_slice(&mut buf, field.data())?;
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

pub fn read_flow(source: &mut impl Read) -> Result<FlowField, DataError> {
    read_flow_with_limit(source, DEFAULT_MAX_BYTES)
}

/// Like [`read_flow`] but refuses payloads larger than `max_bytes`.
pub fn read_flow_with_limit(source: &mut impl Read, max_bytes: u64) -> Result<FlowField, DataError> {
    if &binio::read_array::<8>(source)? != FLOW_MAGIC {
        return Err(DataError::BadMagic {
            expected: "ATDNFLOW",
        });
    }
    let version = binio::read_u32(source)?;
    if version != FLOW_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let h = binio::read_u32(source)? as u64;
    let w = binio::read_u32(source)? as u64;
    let bytes = h.saturating_mul(w).saturating_mul(8);
    if bytes > max_bytes {
        return Err(DataError::Oversized {
            bytes,
            cap: max_bytes,
        });
    }
    let data = binio::read_f32_vec(source, (h * w * 2) as usize)?;
    FlowField::new(h as usize, w as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_layout() {
        let mut buf = Vec::new();
        let n = write_flow(&FlowField::zeros(2, 2), &mut buf).unwrap();
        assert_eq!(n, 20 + 32);
        assert_eq!(&buf[..8], FLOW_MAGIC);
        assert_eq!(read_flow(&mut buf.as_slice()).unwrap(), FlowField::zeros(2, 2));
    }

    #[test]
    fn truncation_and_caps() {
        let mut buf = Vec::new();
        write_flow(&FlowField::zeros(3, 3), &mut buf).unwrap();
        for cut in [0, 7, 19, buf.len() - 1] {
            assert!(matches!(
                read_flow(&mut &buf[..cut]),
                Err(DataError::Truncated)
            ));
        }
        assert!(matches!(
            read_flow_with_limit(&mut buf.as_slice(), 8),
            Err(DataError::Oversized { .. })
        ));
        let mut huge = buf[..12].to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_flow(&mut huge.as_slice()),
            Err(DataError::Oversized { .. })
        ));
    }
}
