//! Intensity normalization, batching into tensors, and seeded splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::raster::Raster;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `0.299 R + 0.587 G + 0.114 B`.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Scales 8-bit values to `[0, 1]`; with `gray`, RGB input is reduced to
/// one luminance channel.
pub fn normalize(img: &Raster<u8>, gray: bool) -> Raster<f32> {
    if gray && img.channels >= 3 {
        let data = img
            .data
            .chunks_exact(img.channels)
            .map(|px| (luminance(px[0] as f64, px[1] as f64, px[2] as f64) / 255.0) as f32)
            .collect();
        Raster {
            width: img.width,
            height: img.height,
            channels: 1,
            data,
        }
    } else {
        img.map(|v| v as f32 / 255.0)
    }
}

/// Stacks equally sized HWC rasters into an `N × C × H × W` tensor.
pub fn to_tensor<T: Scalar, P: Copy + Default + Into<f64>>(rasters: &[&Raster<P>]) -> Result<Tensor<T>> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot batch zero rasters".into()))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut data = Vec::with_capacity(rasters.len() * w * h * c);
    for r in rasters {
        if (r.width, r.height, r.channels) != (w, h, c) {
            return Err(Error::InvalidArgument(format!(
                "batch mixes {}×{}×{} with {w}×{h}×{c}",
                r.width, r.height, r.channels
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(T::from_f64(r.get(x, y, ch).into()));
                }
            }
        }
    }
    Tensor::new(vec![rasters.len(), c, h, w], data)
}

/// Seeded shuffle followed by a prefix split of `floor(frac · N)` items.
pub fn split_dataset<I: Clone>(items: &[I], frac: f64, seed: u64) -> Result<(Vec<I>, Vec<I>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::InvalidArgument(format!("split fraction {frac} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (frac * items.len() as f64).floor() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_normalizes_to_one() {
        let img = Raster::filled(3, 2, 3, 255u8);
        assert!(normalize(&img, false).data.iter().all(|&v| v == 1.0));
        let g = normalize(&img, true);
        assert_eq!(g.channels, 1);
        assert!(g.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn luminance_weights() {
        let img = Raster::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        assert!((normalize(&img, true).data[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn tensor_is_nchw() {
        let r = Raster::new(2, 1, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let t: Tensor<f64> = to_tensor(&[&r]).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1, 2]);
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let items: Vec<usize> = (0..650).collect();
        let (tr, va) = split_dataset(&items, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (520, 130));
        let mut all: Vec<_> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 0.8, 3).unwrap().0, tr);
        assert_ne!(split_dataset(&items, 0.8, 4).unwrap().0, tr);
        assert!(split_dataset::<usize>(&[], 0.8, 0).is_err());
    }
}
