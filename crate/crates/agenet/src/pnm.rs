//! Minimal binary PGM (P5) / PPM (P6) writers and a PGM reader for
//! round-trip checks. Maxval is fixed at 255.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "pgm: {}x{} needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::InvalidArgument(format!(
            "ppm: {}x{} needs {} bytes, got {}",
            width,
            height,
            3 * width * height,
            rgb.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", width, height)?;
    f.write_all(rgb)?;
    Ok(())
}

/// Reads a binary P5 file back as (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("pgm: bad header".into()))?);
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(Error::Format(format!("pgm: expected P5 header, got {:?}", fields)));
    }
    let width: usize = fields[1].parse().map_err(|_| Error::Format("pgm: bad width".into()))?;
    let height: usize = fields[2].parse().map_err(|_| Error::Format("pgm: bad height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Format(format!("pgm: unsupported maxval {}", fields[3])));
    }
    pos += 1; // single whitespace after maxval
    let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| Error::Format("pgm: truncated pixel data".into()))?;
    Ok((width, height, pixels.to_vec()))
}
