//! Binary (P5) 8-bit PGM reading and writing.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::imageops::{BinaryMask, GrayImage};

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a P5 pgm file")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("pixel payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), PgmError> {
    assert_eq!(data.len(), width * height);
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PgmError> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(b"P5") {
        return Err(PgmError::BadMagic);
    }
    // header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments running to end of line
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::BadHeader("expected integer".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|e| PgmError::BadHeader(format!("{text}: {e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError::BadHeader(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(PgmError::BadHeader("zero extent".into()));
    }
    // single whitespace byte separates header from payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::BadHeader("missing separator before payload".into())),
    }
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated { expected, got: payload.len() });
    }
    Ok((width, height, payload[..expected].to_vec()))
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<(), PgmError> {
    let data: Vec<u8> = img
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(path, img.width, img.height, &data)
}

pub fn load_gray(path: &Path, spacing: (f64, f64)) -> Result<GrayImage, PgmError> {
    let (w, h, data) = read_pgm(path)?;
    let values = data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(GrayImage::new(h, w, spacing, values))
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<(), PgmError> {
    let data: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_pgm(path, mask.width, mask.height, &data)
}

pub fn load_mask(path: &Path, spacing: (f64, f64)) -> Result<BinaryMask, PgmError> {
    let (w, h, data) = read_pgm(path)?;
    let values = data.iter().map(|&b| u8::from(b >= 128)).collect();
    Ok(BinaryMask::new(h, w, spacing, values))
}
