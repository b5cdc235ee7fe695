//! Binary Netpbm (PGM/PPM) reading and writing.
//!
//! 16-bit PGM samples are big-endian, as the Netpbm format requires.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Copy> GrayImage<T> {
    pub fn new(width: u32, height: u32, fill: T) -> Self {
        GrayImage { width, height, data: vec![fill; (width * height) as usize] }
    }

    pub fn get(&self, u: u32, v: u32) -> T {
        self.data[(v * self.width + u) as usize]
    }
}

pub fn encode_pgm8(img: &GrayImage<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm16(img: &GrayImage<u16>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_ppm(width: u32, height: u32, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), (width * height) as usize);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header {
    magic: [u8; 2],
    width: u32,
    height: u32,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Option<Header> {
    if bytes.len() < 2 {
        return None;
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos)? {
                b' ' | b'\t' | b'\n' | b'\r' => pos += 1,
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos)?.is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos)?.is_ascii_whitespace() {
        return None;
    }
    Some(Header { magic, width: fields[0], height: fields[1], maxval: fields[2], data_start: pos + 1 })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_pgm8(bytes: &[u8], path: &Path) -> Result<GrayImage<u8>> {
    let h = parse_header(bytes).ok_or_else(|| Error::format(path, "bad PGM header"))?;
    if &h.magic != b"P5" || h.maxval != 255 {
        return Err(Error::format(path, "expected 8-bit binary PGM"));
    }
    let n = (h.width * h.height) as usize;
    let raster = bytes.get(h.data_start..h.data_start + n).ok_or_else(|| Error::format(path, "truncated raster"))?;
    Ok(GrayImage { width: h.width, height: h.height, data: raster.to_vec() })
}

pub fn decode_pgm16(bytes: &[u8], path: &Path) -> Result<GrayImage<u16>> {
    let h = parse_header(bytes).ok_or_else(|| Error::format(path, "bad PGM header"))?;
    if &h.magic != b"P5" || h.maxval != 65535 {
        return Err(Error::format(path, "expected 16-bit binary PGM"));
    }
    let n = (h.width * h.height) as usize;
    let raster =
        bytes.get(h.data_start..h.data_start + 2 * n).ok_or_else(|| Error::format(path, "truncated raster"))?;
    let data = raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(GrayImage { width: h.width, height: h.height, data })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<[u8; 3]>)> {
    let h = parse_header(bytes).ok_or_else(|| Error::format(path, "bad PPM header"))?;
    if &h.magic != b"P6" || h.maxval != 255 {
        return Err(Error::format(path, "expected 8-bit binary PPM"));
    }
    let n = (h.width * h.height) as usize;
    let raster =
        bytes.get(h.data_start..h.data_start + 3 * n).ok_or_else(|| Error::format(path, "truncated raster"))?;
    Ok((h.width, h.height, raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

pub fn read_pgm8(path: &Path) -> Result<GrayImage<u8>> {
    decode_pgm8(&read_file(path)?, path)
}

pub fn read_pgm16(path: &Path) -> Result<GrayImage<u16>> {
    decode_pgm16(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_is_big_endian() {
        let img = GrayImage { width: 2, height: 1, data: vec![0x0102u16, 0xfffe] };
        let bytes = encode_pgm16(&img);
        assert!(bytes.starts_with(b"P5\n2 1\n65535\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[1, 2, 0xff, 0xfe]);
        assert_eq!(decode_pgm16(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 2\n255\n\x01\x02\x03\x04";
        let img = decode_pgm8(bytes, Path::new("x")).unwrap();
        assert_eq!(img.data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn rejects_wrong_depth_and_truncation() {
        let img = GrayImage { width: 2, height: 2, data: vec![7u8; 4] };
        let bytes = encode_pgm8(&img);
        assert!(decode_pgm16(&bytes, Path::new("x")).is_err());
        assert!(decode_pgm8(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
