//! PNG decoding, restricted to 8-bit single-channel images.

use png::{BitDepth, ColorType, Decoder};

use super::{ImageError, RawImage};

pub fn decode_png(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let decoder = Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::CorruptFile(format!("PNG header: {e}")))?;
    let info = reader.info();
    if info.color_type != ColorType::Grayscale {
        return Err(ImageError::UnsupportedFormat(format!(
            "PNG color type {:?}, expected single-channel grayscale",
            info.color_type
        )));
    }
    if info.bit_depth != BitDepth::Eight {
        return Err(ImageError::UnsupportedFormat(format!(
            "PNG bit depth {:?}, expected 8",
            info.bit_depth
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::CorruptFile(format!("PNG data: {e}")))?;
    buf.truncate(frame.buffer_size());
    RawImage::new(frame.height as usize, frame.width as usize, buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode_png(width: u32, height: u32, color: ColorType, depth: BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, width, height);
            encoder.set_color(color);
            encoder.set_depth(depth);
            let mut writer = encoder.write_header().unwrap();
            writer.write_image_data(data).unwrap();
        }
        out
    }

    #[test]
    fn gray8_round_trips() {
        let data = [0u8, 255, 17, 34, 64, 128];
        let bytes = encode_png(3, 2, ColorType::Grayscale, BitDepth::Eight, &data);
        let img = decode_png(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 3));
        assert_eq!(img.pixels(), &data);
    }

    #[test]
    fn rgb_is_unsupported() {
        let data = [10u8; 12];
        let bytes = encode_png(2, 2, ColorType::Rgb, BitDepth::Eight, &data);
        assert!(matches!(
            decode_png(&bytes),
            Err(ImageError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn sixteen_bit_is_unsupported() {
        let data = [0u8; 8];
        let bytes = encode_png(2, 2, ColorType::Grayscale, BitDepth::Sixteen, &data);
        assert!(matches!(
            decode_png(&bytes),
            Err(ImageError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn garbage_is_corrupt() {
        let mut bytes = encode_png(2, 2, ColorType::Grayscale, BitDepth::Eight, &[1, 2, 3, 4]);
        bytes.truncate(20);
        assert!(matches!(
            decode_png(&bytes),
            Err(ImageError::CorruptFile(_))
        ));
    }
}
