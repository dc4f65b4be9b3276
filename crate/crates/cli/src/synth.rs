//! Seeded synthetic datasets: 4-class RGB textures, gray blob images with
//! masks, and gray fields of round nuclei with their center dots.

use std::fs;
use std::path::{Path, PathBuf};

use nucleo_core::data::{save_png, write_dots_csv, ClassName, Dot, Label, Manifest, Raster, SampleEntry};
use nucleo_core::{Error, Result, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn noise(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).expect("positive sd").sample(rng)
}

/// One texture tile whose pattern identifies the class: horizontal stripes,
/// vertical stripes, scattered dark spots, or a checkerboard.
pub fn texture(class: ClassName, size: usize, rng: &mut ChaCha8Rng) -> Raster<u8> {
    let period = rng.random_range(5.0..9.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint = [
        rng.random_range(150.0..210.0),
        rng.random_range(90.0..150.0),
        rng.random_range(150.0..210.0),
    ];
    let spots: Vec<(f64, f64)> = (0..size * size / 40)
        .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
        .collect();
    let cell = rng.random_range(3..6);
    let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let mut img = Raster::filled(size, size, 3, 0u8);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let shade = match class {
                ClassName::Epithelial => 0.5 + 0.5 * (std::f64::consts::TAU * fy / period + phase).sin(),
                ClassName::Fibroblast => 0.5 + 0.5 * (std::f64::consts::TAU * fx / period + phase).sin(),
                ClassName::Inflammatory => {
                    let near = spots.iter().any(|&(sx, sy)| (sx - fx).powi(2) + (sy - fy).powi(2) < 4.0);
                    if near {
                        0.0
                    } else {
                        1.0
                    }
                }
                ClassName::Miscellaneous => (((x + ox) / cell + (y + oy) / cell) % 2) as f64,
            };
            for (c, &t) in tint.iter().enumerate() {
                let v = t * (0.35 + 0.65 * shade) + noise(rng, 12.0);
                img.set(x, y, c, clamp_u8(v));
            }
        }
    }
    img
}

/// `per_class` tiles of each class, interleaved by class.
pub fn textures(per_class: usize, size: usize, seed: u64) -> Vec<(Raster<u8>, ClassName)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 4);
    for _ in 0..per_class {
        for class in ClassName::ALL {
            out.push((texture(class, size, &mut rng), class));
        }
    }
    out
}

/// Dark noisy background with 2–5 bright rotated ellipses; the mask marks
/// ellipse interiors with 255.
pub fn blob_image(size: usize, rng: &mut ChaCha8Rng) -> (Raster<u8>, Raster<u8>) {
    let n = rng.random_range(2..=5);
    let s = size as f64;
    let blobs: Vec<[f64; 6]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.08 * s..0.18 * s),
                rng.random_range(0.06 * s..0.14 * s),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(150.0..220.0),
            ]
        })
        .collect();
    let mut img = Raster::filled(size, size, 1, 0u8);
    let mut mask = Raster::filled(size, size, 1, 0u8);
    for y in 0..size {
        for x in 0..size {
            let mut v = 40.0;
            for &[cx, cy, a, b, th, level] in &blobs {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = dx * th.cos() + dy * th.sin();
                let w = -dx * th.sin() + dy * th.cos();
                if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
                    v = level;
                    mask.set(x, y, 0, 255);
                }
            }
            img.set(x, y, 0, clamp_u8(v + noise(rng, 15.0)));
        }
    }
    (img, mask)
}

pub fn blobs(n: usize, size: usize, seed: u64) -> Vec<(Raster<u8>, Raster<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| blob_image(size, &mut rng)).collect()
}

/// Minimum center spacing of synthetic nuclei, in pixels.
pub const NUCLEUS_SPACING: f64 = 12.0;
const NUCLEUS_MARGIN: u32 = 6;

/// Places `count` bright round nuclei (radius 3–4 px, soft rim) at least
/// [`NUCLEUS_SPACING`] apart; returns the image and the center dots.
pub fn dotted_field(size: usize, count: usize, rng: &mut ChaCha8Rng) -> (Raster<u8>, Vec<Dot>) {
    let hi = size as u32 - NUCLEUS_MARGIN;
    let mut dots: Vec<Dot> = Vec::with_capacity(count);
    let mut attempts = 0;
    while dots.len() < count && attempts < 10_000 {
        attempts += 1;
        let d = Dot::new(rng.random_range(NUCLEUS_MARGIN..hi), rng.random_range(NUCLEUS_MARGIN..hi));
        let far = dots.iter().all(|o| {
            let (dx, dy) = (o.x as f64 - d.x as f64, o.y as f64 - d.y as f64);
            (dx * dx + dy * dy).sqrt() >= NUCLEUS_SPACING
        });
        if far {
            dots.push(d);
        }
    }
    let nuclei: Vec<(f64, f64, f64, f64)> = dots
        .iter()
        .map(|d| (d.x as f64, d.y as f64, rng.random_range(3.0..4.0), rng.random_range(170.0..230.0)))
        .collect();
    let mut img = Raster::filled(size, size, 1, 0u8);
    for y in 0..size {
        for x in 0..size {
            let mut v: f64 = 30.0;
            for &(cx, cy, r, level) in &nuclei {
                let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let cover = (r + 0.5 - dist).clamp(0.0, 1.0);
                v = v.max(30.0 + cover * (level - 30.0));
            }
            img.set(x, y, 0, clamp_u8(v + noise(rng, 10.0)));
        }
    }
    (img, dots)
}

/// `n` fields with a uniformly drawn nucleus count in `counts`.
pub fn dotted_fields(n: usize, size: usize, counts: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<(Raster<u8>, Vec<Dot>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(counts.clone());
            dotted_field(size, k, &mut rng)
        })
        .collect()
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// Writes a synthetic dataset for `task` under `out_dir` and returns the
/// manifest path. Images go to `images/`, masks to `masks/`, dots to `dots/`.
pub fn write_synthetic(task: Task, n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let images = out_dir.join("images");
    mkdir(&images)?;
    let mut samples = Vec::new();
    let rel = |dir: &str, id: &str, ext: &str| PathBuf::from(format!("{dir}/{id}.{ext}"));
    match task {
        Task::Classification => {
            for (i, (img, class)) in textures(n.div_ceil(4), size, seed).into_iter().take(n).enumerate() {
                let id = format!("tex{i:04}");
                save_png(&img, &out_dir.join(rel("images", &id, "png")))?;
                samples.push(SampleEntry {
                    image: rel("images", &id, "png"),
                    id,
                    label: Label::Class(class),
                });
            }
        }
        Task::Segmentation => {
            mkdir(&out_dir.join("masks"))?;
            for (i, (img, mask)) in blobs(n, size, seed).into_iter().enumerate() {
                let id = format!("blob{i:04}");
                save_png(&img, &out_dir.join(rel("images", &id, "png")))?;
                save_png(&mask, &out_dir.join(rel("masks", &id, "png")))?;
                samples.push(SampleEntry {
                    image: rel("images", &id, "png"),
                    label: Label::Mask(rel("masks", &id, "png")),
                    id,
                });
            }
        }
        Task::Detection => {
            mkdir(&out_dir.join("dots"))?;
            let max = ((size as f64 / NUCLEUS_SPACING).powi(2) / 4.0).max(3.0) as usize;
            for (i, (img, dots)) in dotted_fields(n, size, 3..=max, seed).into_iter().enumerate() {
                let id = format!("field{i:04}");
                save_png(&img, &out_dir.join(rel("images", &id, "png")))?;
                write_dots_csv(&dots, &out_dir.join(rel("dots", &id, "csv")))?;
                samples.push(SampleEntry {
                    image: rel("images", &id, "png"),
                    label: Label::Dots(rel("dots", &id, "csv")),
                    id,
                });
            }
        }
    }
    let path = out_dir.join("manifest.json");
    Manifest { task, samples }.save(&path)?;
    Ok(path)
}
