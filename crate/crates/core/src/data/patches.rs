//! Random and grid patch extraction, and stitching grid patches back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::raster::Raster;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Keep only whole patches inside the image.
    #[default]
    None,
    /// Mirror the image (edge pixel not repeated) on the right and bottom
    /// until the grid covers it.
    Reflect,
}

/// Grid geometry needed to reassemble a full image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub size: usize,
    pub pad: PadMode,
    pub src_width: usize,
    pub src_height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch<P> {
    pub raster: Raster<P>,
    /// Top-left corner in source (padded, for reflect grids) coordinates.
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<P> {
    pub source: String,
    pub patches: Vec<Patch<P>>,
    pub layout: Option<GridLayout>,
}

/// `n` windows of `size × size` at uniform in-bounds offsets drawn from a
/// ChaCha8 stream seeded with `seed` (x then y per patch).
pub fn extract_random_patches<P: Copy + Default>(
    img: &Raster<P>,
    source: &str,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<PatchSet<P>> {
    let offsets = random_offsets(img.width, img.height, n, size, seed)?;
    let patches = offsets
        .into_iter()
        .map(|(x, y)| {
            Ok(Patch {
                raster: img.crop(x, y, size, size)?,
                x,
                y,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        source: source.to_string(),
        patches,
        layout: None,
    })
}

pub fn random_offsets(width: usize, height: usize, n: usize, size: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || width < size || height < size {
        return Err(Error::InvalidArgument(format!(
            "image {width}×{height} is smaller than patch size {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mx, my) = ((width - size) as u32, (height - size) as u32);
    Ok((0..n)
        .map(|_| {
            let x = rng.random_range(0..=mx) as usize;
            let y = rng.random_range(0..=my) as usize;
            (x, y)
        })
        .collect())
}

/// Source index of padded position `i` under mirror padding of an axis of
/// length `n` (edge sample not repeated).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Non-overlapping `size × size` tiles in row-major order.
pub fn extract_grid_patches<P: Copy + Default>(
    img: &Raster<P>,
    source: &str,
    size: usize,
    pad: PadMode,
) -> Result<PatchSet<P>> {
    if size == 0 {
        return Err(Error::InvalidArgument("patch size must be ≥ 1".into()));
    }
    let (rows, cols) = match pad {
        PadMode::None => (img.height / size, img.width / size),
        PadMode::Reflect => (img.height.div_ceil(size), img.width.div_ceil(size)),
    };
    let c = img.channels;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let (x0, y0) = (q * size, r * size);
            let raster = if x0 + size <= img.width && y0 + size <= img.height {
                img.crop(x0, y0, size, size)?
            } else {
                let mut data = Vec::with_capacity(size * size * c);
                for y in y0..y0 + size {
                    let sy = reflect_index(y, img.height);
                    for x in x0..x0 + size {
                        let sx = reflect_index(x, img.width);
                        let i = img.index(sx, sy, 0);
                        data.extend_from_slice(&img.data[i..i + c]);
                    }
                }
                Raster::new(size, size, c, data)?
            };
            patches.push(Patch { raster, x: x0, y: y0 });
        }
    }
    Ok(PatchSet {
        source: source.to_string(),
        patches,
        layout: Some(GridLayout {
            rows,
            cols,
            size,
            pad,
            src_width: img.width,
            src_height: img.height,
        }),
    })
}

/// Reassembles a grid set by its stored offsets (patch order is irrelevant)
/// and crops to the covered part of the source.
pub fn stitch_patches<P: Copy + Default>(ps: &PatchSet<P>) -> Result<Raster<P>> {
    let layout = ps
        .layout
        .ok_or_else(|| Error::InvalidArgument(format!("patch set {} has no grid layout", ps.source)))?;
    let first = ps
        .patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty patch set".into()))?;
    let c = first.raster.channels;
    let (gw, gh) = (layout.cols * layout.size, layout.rows * layout.size);
    let mut canvas = Raster::filled(gw, gh, c, P::default());
    for p in &ps.patches {
        if p.raster.width != layout.size || p.raster.height != layout.size {
            return Err(Error::InvalidArgument("patch size differs from layout".into()));
        }
        canvas.paste(&p.raster, p.x, p.y)?;
    }
    let (w, h) = (layout.src_width.min(gw), layout.src_height.min(gh));
    canvas.crop(0, 0, w, h)
}
