//! PNG rasters and `x,y` dot lists on disk.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::data::raster::{Dot, Raster};
use crate::error::{Error, Result};

/// Reads an 8-bit PNG as 1 (gray) or 3 (RGB) channels; alpha is dropped and
/// other colour types are converted to RGB.
pub fn load_png(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Raster::new(w, h, 1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => Raster::new(w, h, 1, img.to_luma8().into_raw()),
        other => Raster::new(w, h, 3, other.to_rgb8().into_raw()),
    }
    .map_err(|e| Error::data(path, e.to_string()))
}

/// Reads a mask PNG; any nonzero channel marks foreground (stored as 1).
pub fn load_mask_png(path: &Path) -> Result<Raster<u8>> {
    let r = load_png(path)?;
    let c = r.channels;
    let data = r
        .data
        .chunks_exact(c)
        .map(|px| px.iter().any(|&v| v != 0) as u8)
        .collect();
    Raster::new(r.width, r.height, 1, data)
}

pub fn save_png(raster: &Raster<u8>, path: &Path) -> Result<()> {
    let (w, h) = (raster.width as u32, raster.height as u32);
    let res = match raster.channels {
        1 => GrayImage::from_raw(w, h, raster.data.clone()).map(DynamicImage::ImageLuma8),
        3 => RgbImage::from_raw(w, h, raster.data.clone()).map(DynamicImage::ImageRgb8),
        c => {
            return Err(Error::InvalidArgument(format!("cannot write a {c}-channel PNG")));
        }
    };
    let img = res.ok_or_else(|| Error::InvalidArgument("raster buffer size mismatch".into()))?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::data(path, e.to_string()))
}

/// Parses one `x,y` pair per line. Blank lines and a leading `x,y` header
/// are ignored. Dots outside `width × height` are rejected.
pub fn parse_dots_csv(text: &str, width: usize, height: usize) -> std::result::Result<Vec<Dot>, String> {
    let mut dots = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.eq_ignore_ascii_case("x,y")) {
            continue;
        }
        let mut it = line.split(',');
        let (Some(xs), Some(ys), None) = (it.next(), it.next(), it.next()) else {
            return Err(format!("line {}: expected `x,y`, got {line:?}", n + 1));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| format!("line {}: {s:?} is not a non-negative integer", n + 1))
        };
        let (x, y) = (parse(xs)?, parse(ys)?);
        if x as usize >= width || y as usize >= height {
            return Err(format!("line {}: dot ({x},{y}) outside {width}×{height} image", n + 1));
        }
        dots.push(Dot::new(x, y));
    }
    Ok(dots)
}

pub fn load_dots_csv(path: &Path, width: usize, height: usize) -> Result<Vec<Dot>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dots_csv(&text, width, height).map_err(|m| Error::data(path, m))
}

pub fn write_dots_csv(dots: &[Dot], path: &Path) -> Result<()> {
    let mut s = String::new();
    for d in dots {
        s.push_str(&format!("{},{}\n", d.x, d.y));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
