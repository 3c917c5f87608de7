//! Sequence ingestion: KITTI pose files, frame images, precomputed flow
//! fields, and a synthetic ground-plane world with an exact flow oracle.

mod flow;
mod image;
mod poses;
mod synth;

use std::io;

use thiserror::Error;

use crate::binio;
use crate::geometry::Pose;

pub use flow::{read_flow, read_flow_with_limit, write_flow, FLOW_MAGIC, FLOW_VERSION};
pub use image::{
    read_frame, read_frame_with_limit, write_pgm, write_raw_image, ImageFormat, RAW_IMAGE_MAGIC,
    RAW_IMAGE_VERSION,
};
pub use poses::{parse_pose_file, write_pose_file, POSE_RENORMALIZE_TOL};
pub use synth::{flow_at, flow_oracle, synth_sequence, SyntheticWorld, TrajectorySpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: rotation drift {drift:.3e} exceeds tolerance")]
    InvalidRotation { line: usize, drift: f64 },
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("payload is truncated")]
    Truncated,
    #[error("declared size {bytes} bytes exceeds the cap of {cap} bytes")]
    Oversized { bytes: u64, cap: u64 },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid synthetic world: {0}")]
    InvalidWorld(String),
    #[error("pixel ({u}, {v}) does not see the ground plane in front of both cameras")]
    BehindCamera { u: f64, v: f64 },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        if binio::is_eof(&e) {
            Self::Truncated
        } else {
            Self::Io(e)
        }
    }
}

/// Dense displacement field, channel-last `H × W × 2` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if height == 0 || width == 0 {
            return Err(DataError::InvalidField("flow dimensions must be positive".into()));
        }
        if data.len() != height * width * 2 {
            return Err(DataError::InvalidField(format!(
                "expected {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidField("non-finite displacement".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(du, dv)` at row `y`, column `x`.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    /// Block-averages by `factor` and rescales displacements to the coarser pixel grid.
    pub fn downsample(&self, factor: usize) -> Result<FlowField, DataError> {
        if factor == 0 || self.height < factor || self.width < factor {
            return Err(DataError::InvalidField(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor * factor) as f32;
        let mut data = vec![0.0f32; h * w * 2];
        for y in 0..h {
            for x in 0..w {
                let (mut su, mut sv) = (0.0f32, 0.0f32);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let (u, v) = self.at(y * factor + dy, x * factor + dx);
                        su += u;
                        sv += v;
                    }
                }
                data[(y * w + x) * 2] = su * norm;
                data[(y * w + x) * 2 + 1] = sv * norm;
            }
        }
        Ok(FlowField {
            height: h,
            width: w,
            data,
        })
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(DataError::InvalidField(format!(
                "image {height}x{width} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidField("intensity outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image, DataError> {
        if factor == 0 || self.height < factor || self.width < factor {
            return Err(DataError::InvalidField(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut data = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = (y * factor + dy) * self.width + x * factor;
                    s += self.data[row..row + factor].iter().sum::<f32>();
                }
                data[y * w + x] = (s * norm).clamp(0.0, 1.0);
            }
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }

    /// Downsamples to `size × size`, which must divide the current square extent.
    pub fn resized_to(&self, size: usize) -> Result<Image, DataError> {
        if self.height != self.width || size == 0 || !self.height.is_multiple_of(size) {
            return Err(DataError::DimensionMismatch {
                expected: (size, size),
                actual: (self.height, self.width),
            });
        }
        self.downsample(self.height / size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub image: Image,
    pub pose: Option<Pose>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_rejects_non_finite() {
        assert!(FlowField::new(1, 1, vec![f32::NAN, 0.0]).is_err());
        assert!(FlowField::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn flow_downsample_rescales_displacement() {
        let f = FlowField::new(2, 2, vec![4.0, -2.0, 4.0, -2.0, 4.0, -2.0, 4.0, -2.0]).unwrap();
        let d = f.downsample(2).unwrap();
        assert_eq!(d.data(), &[2.0, -1.0]);
    }

    #[test]
    fn image_downsample_averages() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(img.downsample(2).unwrap().data(), &[0.5]);
        assert!(Image::new(1, 1, vec![1.5]).is_err());
    }
}
