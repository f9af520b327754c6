//! Binary greyscale PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Config(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn save(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

/// `(width, height, pixels)` of a P5 file with maxval 255.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Corrupt("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Corrupt(format!("bad PGM field {s:?}")))
    };
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::Corrupt("not an 8-bit P5 image".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(i + 1..).unwrap_or(&[]);
    if data.len() != w * h {
        return Err(Error::Corrupt(format!(
            "{} pixel bytes for a {w}x{h} image",
            data.len()
        )));
    }
    Ok((w, h, data.to_vec()))
}
