use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width × channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P = u8> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<P>,
}

impl<P: Copy + Default> Raster<P> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<P>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster extents must be positive, got {width}×{height}×{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "raster buffer has {} values, expected {width}×{height}×{channels}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: P) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> P {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: P) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Copies the `w × h` window at `(x, y)`; the window must lie inside.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {w}×{h} at ({x},{y}) exceeds {}×{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = self.index(x, row, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Writes `src` with its top-left corner at `(x, y)`, clipping at the
    /// borders.
    pub fn paste(&mut self, src: &Raster<P>, x: usize, y: usize) -> Result<()> {
        if src.channels != self.channels {
            return Err(Error::InvalidArgument(format!(
                "paste of {} channels into {}",
                src.channels, self.channels
            )));
        }
        let c = self.channels;
        let w = src.width.min(self.width.saturating_sub(x));
        for row in 0..src.height.min(self.height.saturating_sub(y)) {
            let d = self.index(x, y + row, 0);
            let s = src.index(0, row, 0);
            self.data[d..d + w * c].copy_from_slice(&src.data[s..s + w * c]);
        }
        Ok(())
    }

    pub fn map<Q: Copy + Default>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A point annotation, `x` = column, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dot {
    pub x: u32,
    pub y: u32,
}

impl Dot {
    pub fn new(x: u32, y: u32) -> Self {
        Dot { x, y }
    }

    pub fn to_point(self) -> crate::metrics::detection::Point {
        crate::metrics::detection::Point::new(self.x as f64, self.y as f64)
    }
}
