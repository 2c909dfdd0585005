//! Binary Netpbm: P6 (RGB) and P5 (gray), 8-bit only.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit image, row-major with `channels` interleaved samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(width, height, rgb))?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(width, height, gray))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image8> {
    decode(&fs::read(path)?, b"P6", 3).map_err(|detail| Error::format(path, detail))
}

pub fn read_pgm(path: &Path) -> Result<Image8> {
    decode(&fs::read(path)?, b"P5", 1).map_err(|detail| Error::format(path, detail))
}

/// Parses a binary Netpbm stream with the given magic.
pub fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Image8, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (only 255)"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after header".into()),
    }
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(format!("raster truncated: {} of {expected} bytes", raster.len()));
    }
    Ok(Image8 {
        width,
        height,
        channels,
        data: raster[..expected].to_vec(),
    })
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize, String> {
    // skip whitespace and comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err("header ended early".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format!("expected a number at byte {start}"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|e| format!("bad header number: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let img = decode(&encode_ppm(2, 3, &rgb), b"P6", 3).unwrap();
        assert_eq!((img.width, img.height), (2, 3));
        assert_eq!(img.data, rgb);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# depth\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode(&bytes, b"P5", 1).unwrap();
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn maxval_other_than_255_rejected() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0; 6]);
        let err = decode(&bytes, b"P6", 3).unwrap_err();
        assert!(err.contains("maxval"));
    }

    #[test]
    fn wrong_magic_and_truncation() {
        assert!(decode(b"P3\n1 1\n255\n", b"P6", 3).is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x01", b"P6", 3).unwrap_err().contains("truncated"));
    }
}
