//! Binary PPM (P6) image IO: 8-bit and 16-bit variants.

use desplat_core::img::ImageBuf;
use desplat_core::math::round;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpmDepth {
    Eight,
    Sixteen,
}

fn quantize(v: f64, max: f64) -> u32 {
    round(v.clamp(0.0, 1.0) * max) as u32
}

pub fn write_ppm(path: &Path, img: &ImageBuf, depth: PpmDepth) -> io::Result<()> {
    let max = match depth {
        PpmDepth::Eight => 255u32,
        PpmDepth::Sixteen => 65535u32,
    };
    let mut out = Vec::with_capacity(
        64 + img.data.len()
            * match depth {
                PpmDepth::Eight => 1,
                PpmDepth::Sixteen => 2,
            },
    );
    write!(out, "P6\n{} {}\n{}\n", img.width, img.height, max)?;
    for &v in &img.data {
        let q = quantize(v, max as f64);
        match depth {
            PpmDepth::Eight => out.push(q as u8),
            // Multi-byte PPM samples are most-significant byte first.
            PpmDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    fs::write(path, out)
}

pub fn read_ppm(path: &Path) -> io::Result<ImageBuf> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn parse_ppm(bytes: &[u8]) -> Result<ImageBuf, String> {
    let mut cursor = bytes;
    let magic = next_token(&mut cursor)?;
    if magic != b"P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let width: u32 = parse_token(&mut cursor)?;
    let height: u32 = parse_token(&mut cursor)?;
    let maxval: u32 = parse_token(&mut cursor)?;
    if maxval != 255 && maxval != 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if cursor.is_empty() {
        return Err("truncated header".into());
    }
    cursor = &cursor[1..];

    let n = width as usize * height as usize * 3;
    let mut img = ImageBuf::new(width, height);
    if maxval == 255 {
        if cursor.len() < n {
            return Err("truncated pixel data".into());
        }
        for (slot, &b) in img.data.iter_mut().zip(cursor.iter()) {
            *slot = b as f64 / 255.0;
        }
    } else {
        if cursor.len() < n * 2 {
            return Err("truncated pixel data".into());
        }
        for (i, slot) in img.data.iter_mut().enumerate() {
            let hi = cursor[i * 2] as u16;
            let lo = cursor[i * 2 + 1] as u16;
            *slot = ((hi << 8) | lo) as f64 / 65535.0;
        }
    }
    Ok(img)
}

/// Next whitespace-delimited token, skipping `#` comments.
fn next_token<'a>(cursor: &mut &'a [u8]) -> Result<&'a [u8], String> {
    let mut i = 0;
    let bytes = *cursor;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        break;
    }
    let start = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    if start == i {
        return Err("unexpected end of header".into());
    }
    let token = &bytes[start..i];
    *cursor = &bytes[i..];
    Ok(token)
}

fn parse_token<T: std::str::FromStr>(cursor: &mut &[u8]) -> Result<T, String> {
    let token = next_token(cursor)?;
    std::str::from_utf8(token)
        .map_err(|_| "non-utf8 header token".to_string())?
        .parse()
        .map_err(|_| "malformed header number".to_string())
}
