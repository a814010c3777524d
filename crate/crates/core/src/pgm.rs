//! Binary greymap (P5) I/O.
//!
//! Samples in `[0, 1]` map to bytes by `round(255 v)` with ties away from zero,
//! clamped to `0..=255`. Reading divides by the file's maxval.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.values().iter().map(|&v| to_byte(v)));
    out
}

pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Header tokens are whitespace separated; `#` starts a comment to end of line.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if tokens[0] != "P5" {
        return Err(Error::Parse(format!("expected P5 magic, got '{}'", tokens[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad {what} '{s}'")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Parse(format!(
            "raster truncated: need {n} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let values = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    ImageGrid::new(height, width, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
    }

    #[test]
    fn quantized_round_trip() {
        let mut rng = SeededRng::new(11);
        let img = ImageGrid::from_fn(5, 7, |_, _| rng.int_inclusive(0, 255) as f64 / 255.0);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.shape(), (1, 2));
        assert_eq!(img.values(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_headers() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
