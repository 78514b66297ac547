//! Real-valued 2D matrices: filter outputs, transform coefficients, and the
//! flat binary `.tvfm` container they are cached in.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes at the start of every `.tvfm` file.
pub const TVFM_MAGIC: [u8; 4] = *b"TVFM";
/// Current `.tvfm` container version.
pub const TVFM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureMapError {
    #[error("value buffer holds {got} entries, expected {expected} ({height}x{width})")]
    SizeMismatch {
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("feature map dimensions must be at least 1x1")]
    EmptyMap,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("not a TVFM file (bad magic)")]
    BadMagic,
    #[error("unsupported TVFM version {0}")]
    BadVersion(u32),
    #[error("TVFM payload truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    /// Builds a map from row-major values, checking shape and finiteness.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, FeatureMapError> {
        if height == 0 || width == 0 {
            return Err(FeatureMapError::EmptyMap);
        }
        let expected = height * width;
        if values.len() != expected {
            return Err(FeatureMapError::SizeMismatch {
                height,
                width,
                expected,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureMapError::NonFinite {
                row: pos / width,
                col: pos % width,
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "feature map must be non-empty");
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Builds a map by evaluating `f(row, col)` at every cell.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values).expect("generator produced non-finite value")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.height && col < self.width);
        self.values[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Writes the map in the flat binary `.tvfm` layout: magic, u32 version,
    /// u32 height, u32 width, then height*width little-endian f64 values.
    pub fn write_tvfm<W: Write>(&self, mut out: W) -> Result<(), FeatureMapError> {
        out.write_all(&TVFM_MAGIC)?;
        out.write_all(&TVFM_VERSION.to_le_bytes())?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_tvfm(&self, path: &Path) -> Result<(), FeatureMapError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_tvfm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_tvfm<R: Read>(mut input: R) -> Result<Self, FeatureMapError> {
        let mut magic = [0u8; 4];
        read_exact_or_truncated(&mut input, &mut magic)?;
        if magic != TVFM_MAGIC {
            return Err(FeatureMapError::BadMagic);
        }
        let version = read_u32(&mut input)?;
        if version != TVFM_VERSION {
            return Err(FeatureMapError::BadVersion(version));
        }
        let height = read_u32(&mut input)? as usize;
        let width = read_u32(&mut input)? as usize;
        let count = height
            .checked_mul(width)
            .ok_or(FeatureMapError::Truncated)?;
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            read_exact_or_truncated(&mut input, &mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Self::new(height, width, values)
    }

    pub fn load_tvfm(path: &Path) -> Result<Self, FeatureMapError> {
        Self::read_tvfm(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, FeatureMapError> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(input, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_or_truncated<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), FeatureMapError> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FeatureMapError::Truncated
        } else {
            FeatureMapError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(matches!(
            FeatureMap::new(2, 2, vec![1.0; 3]),
            Err(FeatureMapError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            FeatureMap::new(1, 3, vec![0.0, f64::NAN, 1.0]),
            Err(FeatureMapError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn tvfm_round_trip_is_exact() {
        let m = FeatureMap::from_fn(3, 5, |r, c| (r as f64 + 0.25) * (c as f64 - 1.5));
        let mut bytes = Vec::new();
        m.write_tvfm(&mut bytes).unwrap();
        let back = FeatureMap::read_tvfm(bytes.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn tvfm_rejects_bad_magic_and_truncation() {
        let m = FeatureMap::zeros(2, 2);
        let mut bytes = Vec::new();
        m.write_tvfm(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureMap::read_tvfm(bad.as_slice()),
            Err(FeatureMapError::BadMagic)
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            FeatureMap::read_tvfm(cut),
            Err(FeatureMapError::Truncated)
        ));
    }
}
