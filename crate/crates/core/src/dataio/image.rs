//! Frame images: binary PGM (P5), binary PPM (P6) and a raw f32 grid
//! `"ATDNIMG1" | version u32 | H u32 | W u32 | H·W f32`.

use std::io::{Read, Write};

use super::{DataError, Frame, Image};
use crate::binio::{self, DEFAULT_MAX_BYTES};

pub const RAW_IMAGE_MAGIC: &[u8; 8] = b"ATDNIMG1";
pub const RAW_IMAGE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary PGM or PPM, distinguished by the magic number.
    Pnm,
    Raw,
}

impl ImageFormat {
    /// Guesses the format from a file extension.
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "pgm" | "ppm" | "pnm" => Some(Self::Pnm),
            "raw" | "img" => Some(Self::Raw),
            _ => None,
        }
    }
}

pub fn read_frame(source: &mut impl Read, format: ImageFormat, frame_id: u64) -> Result<Frame, DataError> {
    read_frame_with_limit(source, format, frame_id, DEFAULT_MAX_BYTES)
}

pub fn read_frame_with_limit(
    source: &mut impl Read,
    format: ImageFormat,
    frame_id: u64,
    max_bytes: u64,
) -> Result<Frame, DataError> {
    let image = match format {
        ImageFormat::Pnm => read_pnm(source, max_bytes)?,
        ImageFormat::Raw => read_raw(source, max_bytes)?,
    };
    Ok(Frame {
        frame_id,
        image,
        pose: None,
    })
}

fn read_raw(r: &mut impl Read, max_bytes: u64) -> Result<Image, DataError> {
    if &binio::read_array::<8>(r)? != RAW_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: "ATDNIMG1",
        });
    }
    let version = binio::read_u32(r)?;
    if version != RAW_IMAGE_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let h = binio::read_u32(r)? as u64;
    let w = binio::read_u32(r)? as u64;
    let bytes = h.saturating_mul(w).saturating_mul(4);
    if bytes > max_bytes {
        return Err(DataError::Oversized { bytes, cap: max_bytes });
    }
    let data = binio::read_f32_vec(r, (h * w) as usize)?;
    Image::new(h as usize, w as usize, data)
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn header_token(r: &mut impl Read) -> Result<String, DataError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            while byte[0] != b'\n' {
                r.read_exact(&mut byte)?;
            }
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c as char);
        }
    }
}

fn header_number(r: &mut impl Read, what: &str) -> Result<u64, DataError> {
    let tok = header_token(r)?;
    tok.parse()
        .map_err(|_| DataError::UnsupportedFormat(format!("bad {what} {tok:?} in PNM header")))
}

fn read_pnm(r: &mut impl Read, max_bytes: u64) -> Result<Image, DataError> {
    let magic = header_token(r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(DataError::UnsupportedFormat(format!("PNM magic {other:?}"))),
    };
    let w = header_number(r, "width")?;
    let h = header_number(r, "height")?;
    let maxval = header_number(r, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(DataError::UnsupportedFormat(format!(
            "PNM header {w}x{h} maxval {maxval}"
        )));
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let bytes = w.saturating_mul(h).saturating_mul(channels * sample_bytes);
    if bytes > max_bytes {
        return Err(DataError::Oversized { bytes, cap: max_bytes });
    }
    let mut raw = vec![0u8; bytes as usize];
    r.read_exact(&mut raw)?;
    let samples: Vec<f64> = if sample_bytes == 1 {
        raw.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    let data = if channels == 1 {
        samples.iter().map(|&v| v.min(1.0) as f32).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).min(1.0) as f32)
            .collect()
    };
    Image::new(h as usize, w as usize, data)
}

pub fn write_raw_image(image: &Image, w: &mut impl Write) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(20 + image.data().len() * 4);
    buf.extend_from_slice(RAW_IMAGE_MAGIC);
    buf.extend_from_slice(&RAW_IMAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(image.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(image.width() as u32).to_le_bytes());
    binio::write_f32_slice(&mut buf, image.data())?;
    w.write_all(&buf)
}

/// 8-bit binary PGM; intensities are rounded to the nearest level.
pub fn write_pgm(image: &Image, w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel() {
        let bytes = b"P5\n1 1\n255\n\xff";
        let f = read_frame(&mut &bytes[..], ImageFormat::Pnm, 3).unwrap();
        assert_eq!(f.image.data(), &[1.0]);
        assert_eq!(f.frame_id, 3);
    }

    #[test]
    fn comments_and_zero_image() {
        let mut bytes = b"P5 # a comment\n2 # w\n2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let f = read_frame(&mut bytes.as_slice(), ImageFormat::Pnm, 0).unwrap();
        assert_eq!(f.image.data(), &[0.0; 4]);
    }

    #[test]
    fn ppm_luma_and_sixteen_bit() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let f = read_frame(&mut bytes.as_slice(), ImageFormat::Pnm, 0).unwrap();
        assert!((f.image.data()[0] - 0.299).abs() < 1e-6);
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x80, 0x00]);
        let f = read_frame(&mut bytes.as_slice(), ImageFormat::Pnm, 0).unwrap();
        assert!((f.image.data()[0] - 32768.0 / 65535.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_other_formats() {
        let err = read_frame(&mut &b"P2\n1 1\n255\n0"[..], ImageFormat::Pnm, 0).unwrap_err();
        assert!(matches!(err, DataError::UnsupportedFormat(_)));
        let err = read_frame(&mut &b"P5\n1 1\n255\n"[..], ImageFormat::Pnm, 0).unwrap_err();
        assert!(matches!(err, DataError::Truncated));
    }

    #[test]
    fn raw_round_trip_and_pgm_write() {
        let img = Image::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_raw_image(&img, &mut buf).unwrap();
        let back = read_frame(&mut buf.as_slice(), ImageFormat::Raw, 0).unwrap();
        assert_eq!(back.image, img);
        let mut pgm = Vec::new();
        write_pgm(&img, &mut pgm).unwrap();
        let back = read_frame(&mut pgm.as_slice(), ImageFormat::Pnm, 0).unwrap();
        assert_eq!(back.image.data()[5], 1.0);
    }
}
