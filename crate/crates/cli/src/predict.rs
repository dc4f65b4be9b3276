//! `predict`: runs a checkpoint on one image and writes the task's artifacts.
//!
//! | task           | files                                          |
//! |----------------|------------------------------------------------|
//! | classification | `probabilities.json`                           |
//! | segmentation   | `mask.png`, `probability.png`                  |
//! | detection      | `density.png`, `overlay.png`, `dots.csv`       |

use std::fs;
use std::path::{Path, PathBuf};

use nucleo_core::data::{load_png, normalize, save_png, write_dots_csv, ClassName, DensitySurface, Dot, Raster};
use nucleo_core::metrics::detection::{detect_peaks, Point};
use nucleo_core::{Model, Task};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::infer::{predict_dense, predict_tiles};
use crate::train::ModelFile;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TileProbabilities {
    pub x: usize,
    pub y: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassPrediction {
    pub classes: Vec<ClassName>,
    pub tiles: Vec<TileProbabilities>,
    /// Tile-averaged probabilities.
    pub mean: Vec<f64>,
    pub predicted: ClassName,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(ClassPrediction),
    Mask { probability: Raster<f32>, mask: Raster<u8> },
    Density { density: Raster<f32>, dots: Vec<Point> },
}

#[derive(Clone, Debug)]
pub struct PredictOutcome {
    pub prediction: Prediction,
    pub files: Vec<PathBuf>,
}

pub fn predict_image(mf: &ModelFile, model: &Model<f32>, image: &Path) -> CliResult<Prediction> {
    let cfg = &mf.config;
    let raw = load_png(image)?;
    let img = normalize(&raw, cfg.grayscale());
    let ctx = |e: nucleo_core::Error| CliError::Data(format!("{}: {e}", image.display()));
    Ok(match cfg.task {
        Task::Classification => {
            let tiles = predict_tiles(model, &img, cfg.patch_size, cfg.batch_size).map_err(ctx)?;
            let c = tiles[0].2.len();
            let mut mean = vec![0.0; c];
            for (_, _, p) in &tiles {
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += v / tiles.len() as f64;
                }
            }
            let best = (0..c).fold(0, |b, i| if mean[i] > mean[b] { i } else { b });
            Prediction::Class(ClassPrediction {
                classes: ClassName::ALL[..c.min(4)].to_vec(),
                tiles: tiles
                    .into_iter()
                    .map(|(x, y, probabilities)| TileProbabilities { x, y, probabilities })
                    .collect(),
                mean,
                predicted: ClassName::from_id(best).unwrap_or(ClassName::Miscellaneous),
            })
        }
        Task::Segmentation => {
            let probability = predict_dense(model, &img, cfg.patch_size, cfg.batch_size).map_err(ctx)?;
            let mask = probability.map(|p| if p as f64 > cfg.threshold { 255 } else { 0 });
            Prediction::Mask { probability, mask }
        }
        Task::Detection => {
            let density = predict_dense(model, &img, cfg.patch_size, cfg.batch_size).map_err(ctx)?;
            let d: Vec<f64> = density.data.iter().map(|&v| v as f64).collect();
            let dots = detect_peaks(&d, density.height, density.width, cfg.threshold, cfg.min_distance);
            Prediction::Density { density, dots }
        }
    })
}

fn to_u8(r: &Raster<f32>, scale: f64) -> Raster<u8> {
    r.map(|v| (v as f64 * scale).round().clamp(0.0, 255.0) as u8)
}

/// Gray input as RGB with a green cross on each detected dot.
pub fn overlay(img: &Raster<u8>, dots: &[Point]) -> Raster<u8> {
    let mut out = Raster::filled(img.width, img.height, 3, 0u8);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = if img.channels >= 3 {
                nucleo_core::data::luminance(img.get(x, y, 0) as f64, img.get(x, y, 1) as f64, img.get(x, y, 2) as f64)
                    .round() as u8
            } else {
                img.get(x, y, 0)
            };
            for c in 0..3 {
                out.set(x, y, c, v);
            }
        }
    }
    for p in dots {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for d in -2i64..=2 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                    out.set(x as usize, y as usize, 0, 0);
                    out.set(x as usize, y as usize, 1, 255);
                    out.set(x as usize, y as usize, 2, 0);
                }
            }
        }
    }
    out
}

/// Predicts on `image` and writes the artifacts into `out_dir`.
pub fn predict(mf: &ModelFile, model: &Model<f32>, image: &Path, out_dir: &Path) -> CliResult<PredictOutcome> {
    let prediction = predict_image(mf, model, image)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut files = Vec::new();
    match &prediction {
        Prediction::Class(c) => {
            let p = out_dir.join("probabilities.json");
            fs::write(&p, serde_json::to_string_pretty(c).expect("prediction serializes"))
                .map_err(|e| CliError::io(&p, e))?;
            files.push(p);
        }
        Prediction::Mask { probability, mask } => {
            let (m, p) = (out_dir.join("mask.png"), out_dir.join("probability.png"));
            save_png(mask, &m)?;
            save_png(&to_u8(probability, 255.0), &p)?;
            files.extend([m, p]);
        }
        Prediction::Density { density, dots } => {
            let peak = DensitySurface::peak_value(mf.config.sigma);
            let max = density.data.iter().fold(peak, |m, &v| m.max(v as f64));
            let (d, o, c) = (out_dir.join("density.png"), out_dir.join("overlay.png"), out_dir.join("dots.csv"));
            save_png(&to_u8(density, 255.0 / max), &d)?;
            save_png(&overlay(&load_png(image)?, dots), &o)?;
            let as_dots: Vec<Dot> = dots.iter().map(|p| Dot::new(p.x.round() as u32, p.y.round() as u32)).collect();
            write_dots_csv(&as_dots, &c)?;
            files.extend([d, o, c]);
        }
    }
    Ok(PredictOutcome { prediction, files })
}
