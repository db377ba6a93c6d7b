//! The VLKD dense-matrix file: `"VLKD"`, `u8` version (1), `u32` rows,
//! `u32` cols, then `rows * cols` little-endian `f32` values, row-major.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"VLKD";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Frames kept per video; longer inputs are truncated on load.
pub const MAX_FRAMES: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures<T> {
    /// `|v| x d_v` frame features.
    pub frames: Array2<T>,
    pub source_id: String,
}

impl<T: Scalar> VideoFeatures<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn cast<U: Scalar>(&self) -> VideoFeatures<U> {
        VideoFeatures {
            frames: self.frames.mapv(|v| U::of(v.to_f64_lossy())),
            source_id: self.source_id.clone(),
        }
    }
}

pub fn encode_matrix<T: Scalar>(m: &Array2<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            offset: bytes.len(),
        })
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            offset: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { offset: 0 });
    }
    let version = *bytes.get(4).ok_or(Error::Truncated { offset: 4 })?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            offset: 4,
        });
    }
    let rows = read_u32(bytes, 5)? as usize;
    let cols = read_u32(bytes, 9)? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format {
            offset: 5,
            message: "shape overflows".into(),
        })?;
    let end = HEADER_LEN + 4 * n;
    if bytes.len() < end {
        return Err(Error::Truncated {
            offset: bytes.len(),
        });
    }
    if bytes.len() > end {
        return Err(Error::Format {
            offset: end,
            message: "trailing bytes after payload".into(),
        });
    }
    let mut data = Vec::with_capacity(n);
    for (k, chunk) in bytes[HEADER_LEN..end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                offset: HEADER_LEN + 4 * k,
            });
        }
        data.push(v);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

pub fn save_matrix<T: Scalar>(path: impl AsRef<Path>, m: &Array2<T>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    decode_matrix(&fs::read(path)?)
}

pub fn save_video_features<T: Scalar>(path: impl AsRef<Path>, vf: &VideoFeatures<T>) -> Result<()> {
    save_matrix(path, &vf.frames)
}

/// Loads a feature file, keeping at most [`MAX_FRAMES`] frames. The file stem
/// becomes the `source_id`.
pub fn load_video_features(path: impl AsRef<Path>) -> Result<VideoFeatures<f32>> {
    let path = path.as_ref();
    let m = load_matrix(path)?;
    let keep = m.nrows().min(MAX_FRAMES);
    Ok(VideoFeatures {
        frames: m.slice(s![..keep, ..]).to_owned(),
        source_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}
