//! Checkpoint file: `"ATDNCKPT" | version u32 | count u32 | count × entry`,
//! entry = `name_len u16 | name | rank u32 | extents u32×rank | payload f32`.
//! All integers little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor, TensorError};
use crate::binio::{self, DEFAULT_MAX_BYTES};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATDNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint entry {name} exceeds the size cap")]
    Oversized { name: String },
    #[error("checkpoint entry name is not UTF-8")]
    BadName,
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(#[from] TensorError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if binio::is_eof(&e) {
            Self::Truncated
        } else {
            Self::Io(e)
        }
    }
}

pub fn write_checkpoint(store: &ParamStore<f32>, w: &mut impl Write) -> io::Result<()> {
    w.write_all(&checkpoint_bytes(store))
}

pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        binio::write_f32_slice(&mut out, p.value.data()).expect("vec write");
    }
    out
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    if &binio::read_array::<8>(r)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = binio::read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = binio::read_u32(r)?;
    let mut budget = DEFAULT_MAX_BYTES;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = binio::read_u16(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let rank = binio::read_u32(r)?;
        if rank > 8 {
            return Err(CheckpointError::Oversized { name });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut bytes: u64 = 4;
        for _ in 0..rank {
            let e = binio::read_u32(r)?;
            bytes = bytes.saturating_mul(e as u64);
            shape.push(e as usize);
        }
        if bytes > budget {
            return Err(CheckpointError::Oversized { name });
        }
        budget -= bytes;
        let data = binio::read_f32_vec(r, (bytes / 4) as usize)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Reads a checkpoint and copies its values into `store` by parameter name.
pub fn load_checkpoint(store: &mut ParamStore<f32>, r: &mut impl Read) -> Result<(), CheckpointError> {
    let entries = read_checkpoint(r)?;
    store.load_values(&entries)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dense, SeededRng};

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = SeededRng::new(1);
        Dense::new(&mut s, "fc", 5, 3, &mut rng);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = checkpoint_bytes(&s);
        let mut fresh = ParamStore::new();
        let mut rng = SeededRng::new(99);
        Dense::new(&mut fresh, "fc", 5, 3, &mut rng);
        load_checkpoint(&mut fresh, &mut bytes.as_slice()).unwrap();
        assert_eq!(checkpoint_bytes(&fresh), bytes);
    }

    #[test]
    fn detects_truncation_and_magic() {
        let bytes = checkpoint_bytes(&store());
        for cut in [4, 12, 20, bytes.len() - 1] {
            assert!(matches!(
                read_checkpoint(&mut &bytes[..cut]),
                Err(CheckpointError::Truncated)
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let bytes = checkpoint_bytes(&store());
        let mut other = ParamStore::new();
        Dense::new(&mut other, "fc", 4, 3, &mut SeededRng::new(1));
        assert!(matches!(
            load_checkpoint(&mut other, &mut bytes.as_slice()),
            Err(CheckpointError::Mismatch(_))
        ));
    }
}
