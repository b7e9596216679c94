//! Binary NetPBM images: P6 (RGB) for pictures, P5 (gray) for label maps.
//! Only `maxval 255` is accepted.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded P5/P6 image: `channels` interleaved bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a P5 or P6 file held in memory.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    if bytes.len() < 2 {
        return Err(parse_err(bytes.len(), "file too short for a NetPBM magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(parse_err(0, "expected magic P5 or P6")),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("degenerate image size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} is not supported (need 255)")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        Some(_) => return Err(parse_err(c.pos, "expected whitespace after the header")),
        None => return Err(parse_err(c.pos, "file ends inside the header")),
    }
    let need = width * height * channels;
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: {} of {need} bytes present", payload.len()),
        ));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode_pnm(img: &Pnm) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::arg(format!("NetPBM output needs 1 or 3 channels, got {c}"))),
    };
    if img.pixels.len() != img.width * img.height * img.channels {
        return Err(Error::shape("pixel buffer does not match the image size"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn write_pnm(path: &Path, img: &Pnm) -> Result<()> {
    fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit grayscale image.
pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_pnm(
        path,
        &Pnm {
            width,
            height,
            channels: 1,
            pixels: pixels.to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let img = Pnm {
            width: 2,
            height: 1,
            channels: 3,
            pixels: vec![1, 2, 3, 250, 251, 252],
        };
        let bytes = encode_pnm(&img).unwrap();
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
        let commented = b"P6\n# made by hand\n2 1\n255\n\x01\x02\x03\xfa\xfb\xfc";
        assert_eq!(decode_pnm(commented).unwrap(), img);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = b"P5\n3 2\n255\n\x00\x01\x02";
        match decode_pnm(bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_maxval_and_magic() {
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Parse { offset: 7, .. })));
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_pnm(b"P5\nx"), Err(Error::Parse { offset: 3, .. })));
    }
}
