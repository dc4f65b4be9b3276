//! Dataset ingestion, patching, density targets, normalization and splits.
//!
//! All randomness comes from [`ChaCha8Rng`](rand_chacha::ChaCha8Rng) seeded
//! with a `u64`, and only 32/64-bit draws are used, so patch offsets and
//! splits reproduce bit for bit on every platform.

pub mod density;
pub mod io;
pub mod manifest;
pub mod patches;
pub mod prep;
pub mod raster;

pub use density::{dots_to_density, DensitySurface, DEFAULT_SIGMA};
pub use io::{load_dots_csv, load_mask_png, load_png, parse_dots_csv, save_png, write_dots_csv};
pub use manifest::{ClassName, Label, Manifest, SampleEntry};
pub use patches::{extract_grid_patches, extract_random_patches, stitch_patches, GridLayout, PadMode, Patch, PatchSet};
pub use prep::{luminance, normalize, split_dataset, to_tensor};
pub use raster::{Dot, Raster};
