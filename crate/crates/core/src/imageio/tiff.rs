//! Baseline TIFF decoder for uncompressed 8-bit single-channel images.
//!
//! Anything beyond that baseline — compression, multiple samples, deeper
//! bit depths, palettes, planar layouts — is rejected as unsupported rather
//! than decoded approximately. Both byte orders are accepted.

use super::{ImageError, RawImage};

const TAG_WIDTH: u16 = 256;
const TAG_HEIGHT: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_SAMPLE_FORMAT: u16 = 339;

pub fn decode_tiff(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let reader = TiffReader::new(bytes)?;
    let entries = reader.first_ifd()?;

    let get_single = |tag: u16| -> Result<Option<u64>, ImageError> {
        match entries.iter().find(|e| e.tag == tag) {
            Some(e) => Ok(Some(*reader.values(e)?.first().ok_or_else(|| {
                ImageError::CorruptFile(format!("tag {tag} holds no values"))
            })?)),
            None => Ok(None),
        }
    };

    let width = get_single(TAG_WIDTH)?
        .ok_or_else(|| ImageError::CorruptFile("TIFF missing image width".into()))?
        as usize;
    let height = get_single(TAG_HEIGHT)?
        .ok_or_else(|| ImageError::CorruptFile("TIFF missing image height".into()))?
        as usize;

    let compression = get_single(TAG_COMPRESSION)?.unwrap_or(1);
    if compression != 1 {
        return Err(ImageError::UnsupportedFormat(format!(
            "TIFF compression scheme {compression}; only uncompressed baseline is supported"
        )));
    }
    let samples = get_single(TAG_SAMPLES_PER_PIXEL)?.unwrap_or(1);
    if samples != 1 {
        return Err(ImageError::UnsupportedFormat(format!(
            "TIFF with {samples} samples per pixel; expected single-channel grayscale"
        )));
    }
    if let Some(e) = entries.iter().find(|e| e.tag == TAG_BITS_PER_SAMPLE) {
        for bits in reader.values(e)? {
            if bits != 8 {
                return Err(ImageError::UnsupportedFormat(format!(
                    "TIFF with {bits} bits per sample; expected 8"
                )));
            }
        }
    } else {
        return Err(ImageError::UnsupportedFormat(
            "TIFF without BitsPerSample (bilevel image); expected 8-bit grayscale".into(),
        ));
    }
    let photometric = get_single(TAG_PHOTOMETRIC)?.unwrap_or(1);
    if photometric > 1 {
        return Err(ImageError::UnsupportedFormat(format!(
            "TIFF photometric interpretation {photometric}; expected grayscale (0 or 1)"
        )));
    }
    if get_single(TAG_PLANAR_CONFIG)?.unwrap_or(1) != 1 {
        return Err(ImageError::UnsupportedFormat(
            "TIFF planar configuration 2 is not supported".into(),
        ));
    }
    if get_single(TAG_SAMPLE_FORMAT)?.unwrap_or(1) != 1 {
        return Err(ImageError::UnsupportedFormat(
            "TIFF non-unsigned sample format is not supported".into(),
        ));
    }

    let offsets_entry = entries
        .iter()
        .find(|e| e.tag == TAG_STRIP_OFFSETS)
        .ok_or_else(|| ImageError::CorruptFile("TIFF missing strip offsets".into()))?;
    let offsets = reader.values(offsets_entry)?;
    let counts = match entries.iter().find(|e| e.tag == TAG_STRIP_BYTE_COUNTS) {
        Some(e) => reader.values(e)?,
        // A single full-image strip can get away without byte counts.
        None if offsets.len() == 1 => vec![(width * height) as u64],
        None => {
            return Err(ImageError::CorruptFile(
                "TIFF missing strip byte counts".into(),
            ))
        }
    };
    if counts.len() != offsets.len() {
        return Err(ImageError::CorruptFile(format!(
            "TIFF strip tables disagree: {} offsets, {} byte counts",
            offsets.len(),
            counts.len()
        )));
    }
    let _rows_per_strip = get_single(TAG_ROWS_PER_STRIP)?.unwrap_or(height as u64);

    let mut pixels = Vec::with_capacity(width * height);
    for (&off, &len) in offsets.iter().zip(&counts) {
        let (off, len) = (off as usize, len as usize);
        let end = off
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ImageError::CorruptFile("TIFF strip runs past the file".into()))?;
        pixels.extend_from_slice(&bytes[off..end]);
    }
    if pixels.len() != width * height {
        return Err(ImageError::CorruptFile(format!(
            "TIFF strips hold {} bytes, header promises {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    RawImage::new(height, width, pixels)
}

struct IfdEntry {
    tag: u16,
    field_type: u16,
    count: u32,
    raw: [u8; 4],
}

struct TiffReader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
    ifd_offset: usize,
}

impl<'a> TiffReader<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self, ImageError> {
        if bytes.len() < 8 {
            return Err(ImageError::CorruptFile("TIFF shorter than header".into()));
        }
        let big_endian = match &bytes[..2] {
            b"II" => false,
            b"MM" => true,
            _ => return Err(ImageError::CorruptFile("bad TIFF byte-order mark".into())),
        };
        let magic = read_u16(&bytes[2..4], big_endian);
        if magic == 43 {
            return Err(ImageError::UnsupportedFormat("BigTIFF is not supported".into()));
        }
        if magic != 42 {
            return Err(ImageError::CorruptFile(format!("bad TIFF magic {magic}")));
        }
        let ifd_offset = read_u32(&bytes[4..8], big_endian) as usize;
        Ok(Self {
            bytes,
            big_endian,
            ifd_offset,
        })
    }

    fn first_ifd(&self) -> Result<Vec<IfdEntry>, ImageError> {
        let at = self.ifd_offset;
        if at + 2 > self.bytes.len() {
            return Err(ImageError::CorruptFile("TIFF IFD offset out of range".into()));
        }
        let n = read_u16(&self.bytes[at..at + 2], self.big_endian) as usize;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let base = at + 2 + i * 12;
            if base + 12 > self.bytes.len() {
                return Err(ImageError::CorruptFile("TIFF IFD truncated".into()));
            }
            let e = &self.bytes[base..base + 12];
            entries.push(IfdEntry {
                tag: read_u16(&e[0..2], self.big_endian),
                field_type: read_u16(&e[2..4], self.big_endian),
                count: read_u32(&e[4..8], self.big_endian),
                raw: [e[8], e[9], e[10], e[11]],
            });
        }
        Ok(entries)
    }

    /// Reads an entry's values (BYTE, SHORT, or LONG), inline or at offset.
    fn values(&self, entry: &IfdEntry) -> Result<Vec<u64>, ImageError> {
        let elem_size = match entry.field_type {
            1 => 1, // BYTE
            3 => 2, // SHORT
            4 => 4, // LONG
            other => {
                return Err(ImageError::CorruptFile(format!(
                    "TIFF tag {} has unhandled field type {other}",
                    entry.tag
                )))
            }
        };
        let count = entry.count as usize;
        let total = elem_size * count;
        let data: &[u8] = if total <= 4 {
            &entry.raw[..total]
        } else {
            let off = read_u32(&entry.raw, self.big_endian) as usize;
            if off + total > self.bytes.len() {
                return Err(ImageError::CorruptFile(format!(
                    "TIFF tag {} values run past the file",
                    entry.tag
                )));
            }
            &self.bytes[off..off + total]
        };
        Ok((0..count)
            .map(|i| {
                let chunk = &data[i * elem_size..(i + 1) * elem_size];
                match elem_size {
                    1 => chunk[0] as u64,
                    2 => read_u16(chunk, self.big_endian) as u64,
                    _ => read_u32(chunk, self.big_endian) as u64,
                }
            })
            .collect())
    }
}

fn read_u16(b: &[u8], big_endian: bool) -> u16 {
    let arr = [b[0], b[1]];
    if big_endian {
        u16::from_be_bytes(arr)
    } else {
        u16::from_le_bytes(arr)
    }
}

fn read_u32(b: &[u8], big_endian: bool) -> u32 {
    let arr = [b[0], b[1], b[2], b[3]];
    if big_endian {
        u32::from_be_bytes(arr)
    } else {
        u32::from_le_bytes(arr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal little-endian baseline grayscale TIFF: header, raster, IFD.
    fn build_tiff_le(width: u16, height: u16, pixels: &[u8], compression: u16) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"II");
        out.extend_from_slice(&42u16.to_le_bytes());
        let data_start = 8u32;
        let ifd_start = data_start + pixels.len() as u32;
        out.extend_from_slice(&ifd_start.to_le_bytes());
        out.extend_from_slice(pixels);

        let entries: Vec<(u16, u16, u32, u32)> = vec![
            (TAG_WIDTH, 3, 1, width as u32),
            (TAG_HEIGHT, 3, 1, height as u32),
            (TAG_BITS_PER_SAMPLE, 3, 1, 8),
            (TAG_COMPRESSION, 3, 1, compression as u32),
            (TAG_PHOTOMETRIC, 3, 1, 1),
            (TAG_STRIP_OFFSETS, 4, 1, data_start),
            (TAG_SAMPLES_PER_PIXEL, 3, 1, 1),
            (TAG_ROWS_PER_STRIP, 3, 1, height as u32),
            (TAG_STRIP_BYTE_COUNTS, 4, 1, pixels.len() as u32),
        ];
        out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
        for (tag, field_type, count, value) in entries {
            out.extend_from_slice(&tag.to_le_bytes());
            out.extend_from_slice(&field_type.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            if field_type == 3 {
                out.extend_from_slice(&(value as u16).to_le_bytes());
                out.extend_from_slice(&0u16.to_le_bytes());
            } else {
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u32.to_le_bytes()); // no next IFD
        out
    }

    #[test]
    fn decodes_baseline_grayscale() {
        let pixels = [0u8, 255, 17, 34, 1, 2];
        let bytes = build_tiff_le(3, 2, &pixels, 1);
        let img = decode_tiff(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 3));
        assert_eq!(img.pixels(), &pixels);
    }

    #[test]
    fn rejects_compressed_variants() {
        let bytes = build_tiff_le(2, 2, &[1, 2, 3, 4], 5); // LZW flag
        assert!(matches!(
            decode_tiff(&bytes),
            Err(ImageError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn rejects_truncated_strip() {
        let mut bytes = build_tiff_le(4, 4, &[7u8; 16], 1);
        // Lie about the strip length by shrinking the raster region.
        bytes.truncate(bytes.len() - 40);
        assert!(matches!(decode_tiff(&bytes), Err(ImageError::CorruptFile(_))));
    }

    #[test]
    fn big_endian_header_is_understood() {
        // Same structure as build_tiff_le but with MM numbers.
        let pixels = [9u8, 8, 7, 6];
        let mut out = Vec::new();
        out.extend_from_slice(b"MM");
        out.extend_from_slice(&42u16.to_be_bytes());
        let ifd_start = 8u32 + pixels.len() as u32;
        out.extend_from_slice(&ifd_start.to_be_bytes());
        out.extend_from_slice(&pixels);
        let entries: Vec<(u16, u16, u32, u32)> = vec![
            (TAG_WIDTH, 3, 1, 2),
            (TAG_HEIGHT, 3, 1, 2),
            (TAG_BITS_PER_SAMPLE, 3, 1, 8),
            (TAG_COMPRESSION, 3, 1, 1),
            (TAG_PHOTOMETRIC, 3, 1, 1),
            (TAG_STRIP_OFFSETS, 4, 1, 8),
            (TAG_STRIP_BYTE_COUNTS, 4, 1, 4),
        ];
        out.extend_from_slice(&(entries.len() as u16).to_be_bytes());
        for (tag, field_type, count, value) in entries {
            out.extend_from_slice(&tag.to_be_bytes());
            out.extend_from_slice(&field_type.to_be_bytes());
            out.extend_from_slice(&count.to_be_bytes());
            if field_type == 3 {
                out.extend_from_slice(&(value as u16).to_be_bytes());
                out.extend_from_slice(&0u16.to_be_bytes());
            } else {
                out.extend_from_slice(&value.to_be_bytes());
            }
        }
        out.extend_from_slice(&0u32.to_be_bytes());
        let img = decode_tiff(&out).unwrap();
        assert_eq!(img.pixels(), &pixels);
    }
}
