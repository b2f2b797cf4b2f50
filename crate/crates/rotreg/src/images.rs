//! Netpbm image IO for the prediction path.
//!
//! * depth: 16-bit binary PGM (`P5`, maxval 65535) in millimeters, or PFM (`Pf`)
//!   in meters; 0, NaN and negative values are holes
//! * mask: 8-bit binary PGM, nonzero pixels belong to the object
//! * color: 8-bit binary PPM (`P6`)
//!
//! Row 0 is the top row in PGM/PPM. PFM stores rows bottom to top and is
//! flipped on read and write.

use std::fs;
use std::path::Path;

use rotreg_core::geometry::{ColorImage, DepthImage, Image, Mask};

use crate::error::{CliError, Result};
use crate::formats::write_file;

struct Header {
    magic: String,
    width: usize,
    height: usize,
    /// maxval for PGM/PPM, the scale (sign = endianness) for PFM.
    scale: f64,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(CliError::format(path, "truncated netpbm header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(CliError::format(path, "missing raster"));
    }
    let data_start = i + 1;
    let bad = |what: &str| CliError::format(path, format!("bad netpbm {what}"));
    let width = tokens[1].parse::<usize>().map_err(|_| bad("width"))?;
    let height = tokens[2].parse::<usize>().map_err(|_| bad("height"))?;
    let scale = tokens[3].parse::<f64>().map_err(|_| bad("maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("size"));
    }
    Ok(Header { magic: tokens[0].clone(), width, height, scale, data_start })
}

fn raster<'a>(path: &Path, bytes: &'a [u8], h: &Header, bytes_per_pixel: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * bytes_per_pixel;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(CliError::format(path, format!("raster has {} bytes, expected {need}", data.len())));
    }
    Ok(&data[..need])
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Reads a depth image in meters from either supported encoding.
pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    match h.magic.as_str() {
        "P5" if h.scale == 65535.0 => {
            let data = raster(path, &bytes, &h, 2)?;
            let px = data.chunks_exact(2).map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 1000.0).collect();
            Ok(Image::from_vec(h.width, h.height, px)?)
        }
        "P5" => Err(CliError::format(path, "depth PGM must be 16-bit (maxval 65535)")),
        "Pf" => {
            let data = raster(path, &bytes, &h, 4)?;
            let little = h.scale < 0.0;
            let mut px = vec![0.0; h.width * h.height];
            for (k, b) in data.chunks_exact(4).enumerate() {
                let b = [b[0], b[1], b[2], b[3]];
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                let (row, col) = (h.height - 1 - k / h.width, k % h.width);
                px[row * h.width + col] = f64::from(v);
            }
            Ok(Image::from_vec(h.width, h.height, px)?)
        }
        m => Err(CliError::format(path, format!("unsupported depth encoding {m:?}"))),
    }
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    if h.magic != "P5" || h.scale > 255.0 {
        return Err(CliError::format(path, "mask must be an 8-bit binary PGM"));
    }
    let data = raster(path, &bytes, &h, 1)?;
    Ok(Image::from_vec(h.width, h.height, data.iter().map(|&b| b != 0).collect())?)
}

pub fn read_color(path: &Path) -> Result<ColorImage> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    if h.magic != "P6" || h.scale != 255.0 {
        return Err(CliError::format(path, "color must be an 8-bit binary PPM"));
    }
    let data = raster(path, &bytes, &h, 3)?;
    Ok(Image::from_vec(h.width, h.height, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())?)
}

/// 16-bit millimeter PGM; holes and out-of-range depths are written as 0.
pub fn write_depth_mm(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    for &z in &depth.data {
        let mm = (z * 1000.0).round();
        let v = if z.is_finite() && z > 0.0 && mm <= 65535.0 { mm as u16 } else { 0 };
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_file(path, &out)
}

/// Little-endian PFM in meters.
pub fn write_depth_pfm(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for row in (0..depth.height).rev() {
        for col in 0..depth.width {
            out.extend_from_slice(&(*depth.get(col, row) as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    write_file(path, &out)
}

pub fn write_color(path: &Path, color: &ColorImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", color.width, color.height).into_bytes();
    out.extend(color.data.iter().flatten());
    write_file(path, &out)
}
