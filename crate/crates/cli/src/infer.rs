//! Whole-image inference by tiling into model-sized patches.

use nucleo_core::data::{extract_grid_patches, stitch_patches, to_tensor, PadMode, Patch, PatchSet, Raster};
use nucleo_core::train::predict_all;
use nucleo_core::{Model, Result, Tensor};

/// Splits `img` into reflect-padded `size` tiles, predicts each, and stitches
/// the single-channel outputs back to the image extent.
pub fn predict_dense(model: &Model<f32>, img: &Raster<f32>, size: usize, batch: usize) -> Result<Raster<f32>> {
    let tiles = extract_grid_patches(img, "image", size, PadMode::Reflect)?;
    let x: Tensor<f32> = to_tensor(&tiles.patches.iter().map(|p| &p.raster).collect::<Vec<_>>())?;
    let y = predict_all(model, &x, batch)?;
    let per = size * size;
    let patches = tiles
        .patches
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Patch {
                raster: Raster::new(size, size, 1, y.data()[i * per..(i + 1) * per].to_vec())?,
                x: p.x,
                y: p.y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    stitch_patches(&PatchSet {
        source: tiles.source,
        patches,
        layout: tiles.layout,
    })
}

/// Class probabilities of every whole `size` tile of `img` (no padding),
/// with tile offsets.
pub fn predict_tiles(model: &Model<f32>, img: &Raster<f32>, size: usize, batch: usize) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let tiles = extract_grid_patches(img, "image", size, PadMode::None)?;
    if tiles.patches.is_empty() {
        return Err(nucleo_core::Error::InvalidArgument(format!(
            "image {}×{} is smaller than the {size} px model input",
            img.width, img.height
        )));
    }
    let x: Tensor<f32> = to_tensor(&tiles.patches.iter().map(|p| &p.raster).collect::<Vec<_>>())?;
    let y = predict_all(model, &x, batch)?;
    let c = y.shape()[1];
    Ok(tiles
        .patches
        .iter()
        .zip(y.data().chunks_exact(c))
        .map(|(p, probs)| (p.x, p.y, probs.iter().map(|&v| v as f64).collect()))
        .collect())
}
