//! Binary PGM (P5) and PPM (P6) reading and writing, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Encodes an image as P5 (one channel) or P6 (three channels). Values are
/// clamped to `[0, 1]` and rounded to the nearest 8-bit level.
pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::data(format!("PNM output supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Data { path: None, line: Some(self.line), msg: msg.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'\n' => {
                    self.line += 1;
                    self.pos += 1;
                }
                b' ' | b'\t' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("invalid {what}")))
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut cur = Cursor { bytes, pos: 0, line: 1 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("not a binary PGM/PPM file (expected P5 or P6)")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("missing whitespace after maxval")),
    }
    Ok(Header { channels, width, height, maxval, data_offset: cur.pos })
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * h.channels;
    let body = &bytes[h.data_offset..];
    if body.len() < n {
        return Err(Error::data(format!("truncated pixel data: need {n} bytes, found {}", body.len())));
    }
    let scale = 1.0 / h.maxval as f32;
    let data = body[..n].iter().map(|&b| (b as f32 * scale).min(1.0)).collect();
    Image::new(h.height, h.width, h.channels, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0);
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert!(back.same_geometry(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn grayscale_is_single_channel_and_comments_skipped() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 2, 1));
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_headers_report_line() {
        let err = decode(b"P3\n1 1\n255\n0 0 0").unwrap_err();
        assert!(err.to_string().contains("P5 or P6"));
        let err = decode(b"P5\n\n2 x\n255\n").unwrap_err();
        match err {
            Error::Data { line: Some(3), .. } => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode(b"P5\n4 4\n255\n\x00\x00").unwrap_err().to_string().contains("truncated"));
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
