//! Binary PGM (P5) reading and writing for 8-bit grayscale images.
//!
//! Pixels map to luminance floats in [0, 1]; writing rounds to the nearest
//! 8-bit level, so a read/write round trip of quantized data is bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Parses a binary P5 image into an [H, W] tensor scaled to [0, 1].
pub fn parse_pgm(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let mut pos = 0usize;

    let bad = |reason: &str| Error::format(origin, reason);

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("unparsable header field"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM supported (maxval 1..=255)"));
    }
    // single whitespace byte separates header from raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;

    let n = width * height;
    if bytes.len() < pos + n {
        return Err(bad("raster shorter than width * height"));
    }
    // divide rather than multiply by a reciprocal: keeps parse(encode(x))
    // bit-equal to the 8-bit quantization grid
    let maxval = maxval as f32;
    let data = bytes[pos..pos + n].iter().map(|b| *b as f32 / maxval).collect();
    Tensor::from_vec(&[height, width], data)
}

/// Encodes an [H, W] tensor as binary P5 with maxval 255.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    if image.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "PGM image must be [H, W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n255\n").expect("vec write");
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_pgm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Snaps luminance values onto the 8-bit grid so in-memory data equals its
/// PGM round trip.
pub fn quantize_to_8bit(image: &mut Tensor) {
    for v in image.data_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_quantized_data() {
        let mut img = Tensor::from_vec(&[2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        quantize_to_8bit(&mut img);
        let bytes = encode_pgm(&img).unwrap();
        let back = parse_pgm(&bytes, "mem").unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn header_comments_and_whitespace_are_skipped() {
        let bytes = b"P5\n# a comment\n  3\t2\n# another\n255\n\x00\x7f\xff\x01\x02\x03";
        let img = parse_pgm(bytes, "mem").unwrap();
        assert_eq!(img.shape(), &[2, 3]);
        assert!((img.data()[1] - 127.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn malformed_inputs_error() {
        assert!(parse_pgm(b"P6\n1 1\n255\nx", "mem").is_err()); // wrong magic
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01", "mem").is_err()); // truncated raster
        assert!(parse_pgm(b"P5\n2 2\n70000\n", "mem").is_err()); // 16-bit
        assert!(parse_pgm(b"P5\n0 2\n255\n", "mem").is_err()); // zero dim
    }
}
