//! Binary (P5) PGM codec. The writer emits one canonical header form so a
//! decode/re-encode round trip is byte identical.

use super::{ImageError, RawImage};

/// Parses a binary PGM. Comments (`#` to end of line) are allowed in the
/// header; maxval above 255 (a 16-bit raster) is rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    if magic != b"P5" {
        if magic == b"P2" {
            return Err(ImageError::UnsupportedFormat(
                "ASCII (P2) PGM is not supported, convert to binary P5".into(),
            ));
        }
        return Err(ImageError::CorruptFile("missing P5 magic".into()));
    }
    let width = cursor.number()?;
    let height = cursor.number()?;
    let maxval = cursor.number()?;
    if maxval > 255 {
        return Err(ImageError::UnsupportedFormat(format!(
            "maxval {maxval} implies more than 8 bits per pixel"
        )));
    }
    if maxval == 0 {
        return Err(ImageError::CorruptFile("maxval must be positive".into()));
    }
    // Single whitespace byte separates the header from the raster.
    cursor.skip_one_whitespace()?;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| ImageError::CorruptFile("image dimensions overflow".into()))?;
    let raster = &cursor.bytes[cursor.pos..];
    if raster.len() < need {
        return Err(ImageError::CorruptFile(format!(
            "raster holds {} bytes, header promises {}",
            raster.len(),
            need
        )));
    }
    RawImage::new(height, width, raster[..need].to_vec())
}

/// Canonical encoding: `P5\n<width> <height>\n255\n<raster>`.
pub fn encode_pgm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&[u8], ImageError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::CorruptFile("truncated PGM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, ImageError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| ImageError::CorruptFile("bad number in PGM header".into()))
    }

    fn skip_one_whitespace(&mut self) -> Result<(), ImageError> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(ImageError::CorruptFile(
                "missing whitespace before PGM raster".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_known_bytes_exactly() {
        // 2x2 raster [0, 255, 17, 34]
        let bytes = b"P5\n2 2\n255\n\x00\xff\x11\x22";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(img.pixels(), &[0, 255, 17, 34]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1 255\n\xaa\xbb";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img.pixels(), &[0xaa, 0xbb]);
    }

    #[test]
    fn wide_maxval_is_unsupported() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00";
        assert!(matches!(
            decode_pgm(bytes),
            Err(ImageError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncated_raster_is_corrupt() {
        let bytes = b"P5\n4 4\n255\n\x00\x01";
        assert!(matches!(decode_pgm(bytes), Err(ImageError::CorruptFile(_))));
    }
}
