//! Density surfaces: one unit-integral Gaussian per annotated dot.

use crate::data::raster::{Dot, Raster};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 2.0;
/// Kernels are cut off beyond this many standard deviations.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DensitySurface {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    /// Row-major `height × width`.
    pub data: Vec<f64>,
}

impl DensitySurface {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn peak_value(sigma: f64) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * sigma * sigma)
    }

    pub fn to_raster(&self) -> Raster<f32> {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// `D(p) = Σ_dots exp(−|p − dot|² / 2σ²) / (2πσ²)` for `|p − dot| ≤ 4σ`.
pub fn dots_to_density(dots: &[Dot], width: usize, height: usize, sigma: f64) -> Result<DensitySurface> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut data = vec![0.0; width * height];
    let cut = TRUNCATE_SIGMAS * sigma;
    let r = cut.floor() as i64;
    let norm = DensitySurface::peak_value(sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for d in dots {
        if d.x as usize >= width || d.y as usize >= height {
            return Err(Error::InvalidArgument(format!(
                "dot ({},{}) outside {width}×{height}",
                d.x, d.y
            )));
        }
        let (cx, cy) = (d.x as i64, d.y as i64);
        for y in (cy - r).max(0)..=(cy + r).min(height as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(width as i64 - 1) {
                let r2 = ((x - cx).pow(2) + (y - cy).pow(2)) as f64;
                if r2 <= cut * cut {
                    data[y as usize * width + x as usize] += norm * (-r2 * inv).exp();
                }
            }
        }
    }
    Ok(DensitySurface {
        width,
        height,
        sigma,
        data,
    })
}
