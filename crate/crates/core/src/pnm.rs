//! Binary PGM (P5) and PPM (P6) reading and writing.
//!
//! Samples wider than 8 bits are stored big-endian, as netpbm requires.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded netpbm image. `data` is row-major, interleaved for `channels == 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

/// Decodes a P5 or P6 image from memory. `path` is used for diagnostics only.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let channels = match cur.token() {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(other) => {
            return Err(corrupt(
                path,
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
        None => return Err(corrupt(path, "empty file")),
    };
    let width = cur.number().ok_or_else(|| corrupt(path, "missing width"))?;
    let height = cur.number().ok_or_else(|| corrupt(path, "missing height"))?;
    let maxval = cur.number().ok_or_else(|| corrupt(path, "missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(corrupt(path, "zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(path, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(corrupt(path, "missing raster separator"));
    }
    let raster = &bytes[cur.pos + 1..];
    let count = width * height * channels;
    let wide = maxval > 255;
    let needed = if wide { count * 2 } else { count };
    if raster.len() < needed {
        return Err(corrupt(
            path,
            format!("raster has {} bytes, expected {needed}", raster.len()),
        ));
    }
    let data = if wide {
        raster[..needed]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..needed].iter().map(|&b| b as u16).collect()
    };
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Encodes to P5/P6. Samples above `maxval` are clamped.
pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        out.reserve(img.data.len() * 2);
        for &v in &img.data {
            out.extend_from_slice(&v.min(img.maxval).to_be_bytes());
        }
    } else {
        out.extend(img.data.iter().map(|&v| v.min(img.maxval) as u8));
    }
    out
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn write_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    write(
        path,
        &Pnm {
            width,
            height,
            channels: 1,
            maxval: 65535,
            data: data.to_vec(),
        },
    )
}

pub fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write(
        path,
        &Pnm {
            width,
            height,
            channels: 1,
            maxval: 255,
            data: data.iter().map(|&v| v as u16).collect(),
        },
    )
}
