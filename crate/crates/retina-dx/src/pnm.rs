//! Binary PNM (P5 grayscale / P6 RGB) decoding and encoding.
//!
//! Headers are tokenized on whitespace with `#` comments running to end of
//! line; raster data starts after the single whitespace byte that terminates
//! the maxval token. Only 8-bit rasters (maxval 1..=255) are supported.

use crate::error::{Error, Result};
use crate::image::Image8;
use std::fs;
use std::path::Path;

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Returns the next whitespace-delimited token, skipping comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && is_space(self.bytes[self.pos]) {
                self.pos += 1;
            }
            if self.pos >= self.bytes.len() {
                return Err(Error::PnmHeader("unexpected end of header".into()));
            }
            if self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            let start = self.pos;
            while self.pos < self.bytes.len()
                && !is_space(self.bytes[self.pos])
                && self.bytes[self.pos] != b'#'
            {
                self.pos += 1;
            }
            return Ok(&self.bytes[start..self.pos]);
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token()?;
        let s = std::str::from_utf8(tok)
            .map_err(|_| Error::PnmHeader(format!("{what} is not ASCII")))?;
        s.parse()
            .map_err(|_| Error::PnmHeader(format!("invalid {what}: {s:?}")))
    }
}

/// Decodes a binary PGM (P5) or PPM (P6) from memory.
pub fn decode(bytes: &[u8]) -> Result<Image8> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(magic) => {
            return Err(Error::PnmMagic(
                String::from_utf8_lossy(magic).into_owned(),
            ))
        }
        None => return Err(Error::PnmMagic("<empty>".into())),
    };

    let mut scan = HeaderScanner::new(&bytes[2..]);
    let width = scan.number("width")? as usize;
    let height = scan.number("height")? as usize;
    let maxval = scan.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::PnmHeader(format!(
            "dimensions must be positive, got {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::PnmDepth(maxval));
    }

    // Exactly one whitespace byte separates the header from the raster.
    let mut pos = 2 + scan.pos;
    match bytes.get(pos) {
        Some(&b) if is_space(b) => pos += 1,
        _ => return Err(Error::PnmHeader("missing raster separator".into())),
    }

    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::PnmTruncated {
            expected,
            found: raster.len(),
        });
    }
    Image8::new(width, height, channels, raster[..expected].to_vec())
}

/// Encodes in canonical form: `P5`/`P6`, single-space `{w} {h}` line,
/// maxval 255, then the raw raster.
pub fn encode(img: &Image8) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn read_file(path: &Path) -> Result<Image8> {
    decode(&fs::read(path)?)
}

pub fn write_file(path: &Path, img: &Image8) -> Result<()> {
    Ok(fs::write(path, encode(img))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_minimal_p5() {
        let img = decode(b"P5\n3 2\n255\n\x00\x01\x02\x03\x04\x05").unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (3, 2, 1));
        assert_eq!(img.pixels(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn decode_minimal_p6() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 1, 3));
        assert_eq!(img.get(1, 0, 2), 60);
    }

    #[test]
    fn decode_handles_comments_and_odd_whitespace() {
        let img = decode(b"P5 # magic comment\n# full line\n 3\t2 # dims\n255\nabcdef").unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
        assert_eq!(img.pixels(), b"abcdef");
    }

    #[test]
    fn decode_rejects_other_magics() {
        for bad in [&b"P3\n1 1\n255\n1 2 3"[..], b"P7\n", b"BM"] {
            assert!(matches!(decode(bad), Err(Error::PnmMagic(_))), "{bad:?}");
        }
        assert!(matches!(decode(b""), Err(Error::PnmMagic(_))));
    }

    #[test]
    fn decode_rejects_16_bit_maxval() {
        let err = decode(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::PnmDepth(65535)));
    }

    #[test]
    fn decode_rejects_zero_maxval_and_dims() {
        assert!(matches!(decode(b"P5\n1 1\n0\n\x00"), Err(Error::PnmDepth(0))));
        assert!(matches!(
            decode(b"P5\n0 4\n255\n"),
            Err(Error::PnmHeader(_))
        ));
    }

    #[test]
    fn decode_reports_truncation() {
        let err = decode(b"P6\n2 2\n255\nabc").unwrap_err();
        match err {
            Error::PnmTruncated { expected, found } => {
                assert_eq!((expected, found), (12, 3));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn decode_rejects_garbage_header() {
        assert!(matches!(
            decode(b"P5\nwide tall\n255\n"),
            Err(Error::PnmHeader(_))
        ));
        assert!(matches!(decode(b"P5\n3"), Err(Error::PnmHeader(_))));
    }

    #[test]
    fn roundtrip_is_identity() {
        let img = Image8::new(4, 3, 3, (0..36).collect()).unwrap();
        assert_eq!(decode(&encode(&img)).unwrap(), img);

        let gray = Image8::new(5, 2, 1, (10..20).collect()).unwrap();
        assert_eq!(decode(&encode(&gray)).unwrap(), gray);
    }

    #[test]
    fn encode_is_canonical() {
        let img = Image8::new(2, 1, 1, vec![7, 8]).unwrap();
        assert_eq!(encode(&img), b"P5\n2 1\n255\n\x07\x08");
    }

    #[test]
    fn raster_bytes_that_look_like_comments_survive() {
        // 0x23 is '#': must be read as raster data, not a comment.
        let img = Image8::new(2, 2, 1, vec![b'#', b'\n', b'#', b'!']).unwrap();
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }
}
