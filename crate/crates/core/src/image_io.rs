//! Image files.
//!
//! # rawf64 (`BPIM`, little-endian)
//!
//! | offset | type      | field                       |
//! |--------|-----------|-----------------------------|
//! | 0      | [u8; 4]   | magic `BPIM`                |
//! | 4      | u32       | height `H`                  |
//! | 8      | u32       | width `W`                   |
//! | 12     | f64 × H·W | pixels, row-major           |
//! | end-4  | u32       | CRC-32 (IEEE) of the pixels |
//!
//! # pgm16
//!
//! Binary PGM: the ASCII header `P5 W H 65535\n` followed by H·W big-endian u16
//! samples. Values are mapped linearly from `[min, max]` to `[0, 65535]` and
//! rounded; the text sidecar `<path>.range` holds `min max` so that
//! [`read_image`] can undo the mapping up to quantization. A constant image
//! (min = max) is written as all zeros. Without a sidecar, samples are read back
//! as `v / 65535`.

use std::path::{Path, PathBuf};

use crate::binfmt::{f64s_from, Reader, Writer};
use crate::error::{invalid, FormatError, Result};
use crate::grid::ImageGrid;

const MAGIC: [u8; 4] = *b"BPIM";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm16,
    RawF64,
}

impl ImageFormat {
    /// `.pgm` selects pgm16, anything else rawf64.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => ImageFormat::Pgm16,
            _ => ImageFormat::RawF64,
        }
    }
}

pub fn range_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".range");
    PathBuf::from(s)
}

pub fn encode_rawf64(img: &ImageGrid) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u32(img.height() as u32);
    w.u32(img.width() as u32);
    let start = w.len();
    w.f64s(img.values());
    w.seal(start)
}

pub fn decode_rawf64(bytes: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let payload = r.sealed_payload()?;
    if h == 0 || w == 0 || payload.len() != h * w * 8 {
        return Err(FormatError::Shape(format!(
            "{h}x{w} image with {} payload bytes",
            payload.len()
        ))
        .into());
    }
    ImageGrid::new(h, w, f64s_from(payload))
        .map_err(|e| FormatError::Structure(e.to_string()).into())
}

/// PGM bytes and the `(min, max)` range they were mapped from.
pub fn encode_pgm16(img: &ImageGrid) -> (Vec<u8>, (f64, f64)) {
    let (lo, hi) = (img.min(), img.max());
    let mut out = format!("P5 {} {} 65535\n", img.width(), img.height()).into_bytes();
    out.reserve(img.len() * 2);
    for &v in img.values() {
        let q = if hi > lo {
            ((v - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    (out, (lo, hi))
}

fn parse_err(offset: usize, message: impl Into<String>) -> crate::error::Error {
    FormatError::Parse {
        offset,
        message: message.into(),
    }
    .into()
}

/// Raw 16-bit samples of a P5 file.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(parse_err(0, "expected P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        let ws_start = pos;
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        if pos == ws_start {
            return Err(parse_err(pos, format!("expected whitespace before {name}")));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(parse_err(pos, format!("expected {name}")));
        }
        fields[k] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{name} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 65535 {
        return Err(parse_err(
            pos,
            format!("maxval must be 65535, got {maxval}"),
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(pos, "expected single whitespace after maxval"));
    }
    pos += 1;
    if w == 0 || h == 0 {
        return Err(parse_err(pos, "zero image dimension"));
    }
    let need = w * h * 2;
    if bytes.len() - pos != need {
        return Err(parse_err(
            pos,
            format!("expected {need} sample bytes, found {}", bytes.len() - pos),
        ));
    }
    let samples = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, samples))
}

fn parse_range(text: &str) -> Result<(f64, f64)> {
    let mut it = text.split_whitespace().map(str::parse::<f64>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(lo)), Some(Ok(hi)), None) if lo.is_finite() && hi.is_finite() && lo <= hi => {
            Ok((lo, hi))
        }
        _ => Err(parse_err(0, "range sidecar must hold `min max`")),
    }
}

pub fn write_image(img: &ImageGrid, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ImageFormat::RawF64 => std::fs::write(path, encode_rawf64(img))?,
        ImageFormat::Pgm16 => {
            if !img.is_finite() {
                return Err(invalid("pgm16 needs finite values"));
            }
            let (bytes, (lo, hi)) = encode_pgm16(img);
            std::fs::write(path, bytes)?;
            std::fs::write(range_sidecar(path), format!("{lo:e} {hi:e}\n"))?;
        }
    }
    Ok(())
}

/// Reads either format, detected from the leading bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&MAGIC) {
        return decode_rawf64(&bytes);
    }
    if bytes.starts_with(b"P5") {
        let (h, w, samples) = decode_pgm16(&bytes)?;
        let sidecar = range_sidecar(path);
        let (lo, hi) = if sidecar.exists() {
            parse_range(&std::fs::read_to_string(sidecar)?)?
        } else {
            (0.0, 1.0)
        };
        let values = samples
            .iter()
            .map(|&q| lo + (hi - lo) * q as f64 / 65535.0)
            .collect();
        return ImageGrid::new(h, w, values);
    }
    Err(parse_err(0, "unrecognized image format"))
}
