//! On-disk patch store written by `prepare` and read by `train`/`eval`.
//!
//! Layout under the store directory:
//!
//! ```text
//! index.json            StoreIndex
//! patches/<id>.png      8-bit image patch
//! masks/<id>.png        0/255 mask patch (segmentation)
//! dots/<id>.csv         dots in patch coordinates (detection)
//! density/<id>.f32      little-endian f32 density, row-major (detection)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nucleo_core::data::patches::reflect_index;
use nucleo_core::data::{
    dots_to_density, extract_grid_patches, extract_random_patches, load_dots_csv, load_mask_png, load_png,
    normalize, save_png, split_dataset, to_tensor, write_dots_csv, ClassName, Dot, GridLayout, Label, Manifest,
    PadMode, Raster,
};
use nucleo_core::metrics::detection::Point;
use nucleo_core::train::{Dataset, Targets};
use nucleo_core::{Task, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const INDEX_FILE: &str = "index.json";
const SUBDIRS: [&str; 4] = ["patches", "masks", "dots", "density"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub source: String,
    /// Top-left corner in source (padded) coordinates.
    pub x: usize,
    pub y: usize,
    pub image: PathBuf,
    pub class: Option<ClassName>,
    pub mask: Option<PathBuf>,
    pub dots: Option<PathBuf>,
    pub density: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub task: Task,
    pub seed: u64,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub pad: PadMode,
    pub sigma: f64,
    pub grayscale: bool,
    /// Grid geometry per source sample (segmentation and detection).
    pub layouts: BTreeMap<String, GridLayout>,
    pub entries: Vec<StoreEntry>,
}

/// Seed of the random patch stream of the `i`-th manifest sample.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Dots of `dots` (source coordinates) that land in the `size`-wide window at
/// `(x0, y0)` of the padded grid, in window coordinates. Mirrored copies in
/// reflect padding are included.
pub fn dots_in_window(dots: &[Dot], x0: usize, y0: usize, size: usize, w: usize, h: usize) -> Vec<Dot> {
    let mut out = Vec::new();
    for py in y0..y0 + size {
        let sy = reflect_index(py, h);
        for px in x0..x0 + size {
            let sx = reflect_index(px, w);
            if dots.iter().any(|d| d.x as usize == sx && d.y as usize == sy) {
                out.push(Dot::new((px - x0) as u32, (py - y0) as u32));
            }
        }
    }
    out
}

fn rel(sub: &str, id: &str, ext: &str) -> PathBuf {
    PathBuf::from(format!("{sub}/{id}.{ext}"))
}

fn write_patch(dir: &Path, source: &str, k: usize, x: usize, y: usize, patch: &Raster<u8>) -> CliResult<StoreEntry> {
    let id = format!("{source}_{k:04}");
    let image = rel("patches", &id, "png");
    save_png(patch, &dir.join(&image))?;
    Ok(StoreEntry {
        id,
        source: source.to_string(),
        x,
        y,
        image,
        class: None,
        mask: None,
        dots: None,
        density: None,
    })
}

/// Extracts patches for every manifest sample and writes the store. Any
/// previous store content under `dir` is replaced.
pub fn prepare(manifest_path: &Path, dir: &Path, cfg: &RunConfig) -> CliResult<StoreIndex> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.task != cfg.task {
        return Err(CliError::Config(format!(
            "manifest task {} differs from configured task {}",
            manifest.task, cfg.task
        )));
    }
    for sub in SUBDIRS {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }
    for sub in SUBDIRS {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
    }
    let mut index = StoreIndex {
        task: cfg.task,
        seed: cfg.seed,
        patch_size: cfg.patch_size,
        patches_per_image: cfg.patches_per_image,
        pad: cfg.pad,
        sigma: cfg.sigma,
        grayscale: cfg.grayscale(),
        layouts: BTreeMap::new(),
        entries: Vec::new(),
    };
    let size = cfg.patch_size;
    for (i, s) in manifest.samples.iter().enumerate() {
        let img = load_png(&s.image)?;
        match &s.label {
            Label::Class(class) => {
                let ps = extract_random_patches(&img, &s.id, cfg.patches_per_image, size, sample_seed(cfg.seed, i))
                    .map_err(|e| CliError::Data(format!("{}: {e}", s.image.display())))?;
                for (k, p) in ps.patches.iter().enumerate() {
                    let mut e = write_patch(dir, &s.id, k, p.x, p.y, &p.raster)?;
                    e.class = Some(*class);
                    index.entries.push(e);
                }
            }
            Label::Mask(mask_path) => {
                let mask = load_mask_png(mask_path)?;
                if (mask.width, mask.height) != (img.width, img.height) {
                    return Err(CliError::Data(format!(
                        "{}: mask is {}×{} but image is {}×{}",
                        mask_path.display(),
                        mask.width,
                        mask.height,
                        img.width,
                        img.height
                    )));
                }
                let ps = extract_grid_patches(&img, &s.id, size, cfg.pad)?;
                let ms = extract_grid_patches(&mask.map(|v| v * 255), &s.id, size, cfg.pad)?;
                for (k, (p, m)) in ps.patches.iter().zip(&ms.patches).enumerate() {
                    let mut e = write_patch(dir, &s.id, k, p.x, p.y, &p.raster)?;
                    let mp = rel("masks", &e.id, "png");
                    save_png(&m.raster, &dir.join(&mp))?;
                    e.mask = Some(mp);
                    index.entries.push(e);
                }
                index.layouts.insert(s.id.clone(), ps.layout.expect("grid layout"));
            }
            Label::Dots(dots_path) => {
                let dots = load_dots_csv(dots_path, img.width, img.height)?;
                let density = dots_to_density(&dots, img.width, img.height, cfg.sigma)?;
                let density = Raster::new(img.width, img.height, 1, density.data.iter().map(|&v| v as f32).collect())?;
                let ps = extract_grid_patches(&img, &s.id, size, cfg.pad)?;
                let ds = extract_grid_patches(&density, &s.id, size, cfg.pad)?;
                for (k, (p, d)) in ps.patches.iter().zip(&ds.patches).enumerate() {
                    let mut e = write_patch(dir, &s.id, k, p.x, p.y, &p.raster)?;
                    let local = dots_in_window(&dots, p.x, p.y, size, img.width, img.height);
                    let (dp, fp) = (rel("dots", &e.id, "csv"), rel("density", &e.id, "f32"));
                    write_dots_csv(&local, &dir.join(&dp))?;
                    let bytes: Vec<u8> = d.raster.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                    write_bytes(&dir.join(&fp), &bytes)?;
                    e.dots = Some(dp);
                    e.density = Some(fp);
                    index.entries.push(e);
                }
                index.layouts.insert(s.id.clone(), ps.layout.expect("grid layout"));
            }
        }
        log::debug!("prepared {} ({} patches so far)", s.id, index.entries.len());
    }
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    write_bytes(&dir.join(INDEX_FILE), text.as_bytes())?;
    Ok(index)
}

impl StoreIndex {
    pub fn load(dir: &Path) -> CliResult<StoreIndex> {
        let p = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: invalid store index: {e}", p.display())))
    }

    pub fn sources(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.source.clone()))
            .map(|e| e.source.clone())
            .collect()
    }

    /// Seeded split of source samples; all patches of a source land on the
    /// same side.
    pub fn split(&self, frac: f64, seed: u64) -> CliResult<(Vec<&StoreEntry>, Vec<&StoreEntry>)> {
        let (train, _) = split_dataset(&self.sources(), frac, seed)?;
        if train.is_empty() {
            return Err(CliError::Config(format!(
                "split_frac {frac} leaves no training sample out of {}",
                self.sources().len()
            )));
        }
        let train: BTreeSet<_> = train.into_iter().collect();
        Ok(self.entries.iter().partition(|e| train.contains(&e.source)))
    }
}

fn read_density(path: &Path, n: usize) -> CliResult<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() != 4 * n {
        return Err(CliError::Data(format!(
            "{}: expected {} bytes of f32 density, found {}",
            path.display(),
            4 * n,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str, id: &str) -> CliResult<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| CliError::Data(format!("store entry {id} has no {what}")))
}

/// Loads the listed entries as a training/evaluation dataset.
pub fn load_dataset(dir: &Path, index: &StoreIndex, entries: &[&StoreEntry]) -> CliResult<Dataset<f32>> {
    if entries.is_empty() {
        return Err(CliError::Data(format!("{}: no store entries selected", dir.display())));
    }
    let images = entries
        .iter()
        .map(|e| Ok(normalize(&load_png(&dir.join(&e.image))?, index.grayscale)))
        .collect::<CliResult<Vec<_>>>()?;
    let x: Tensor<f32> = to_tensor(&images.iter().collect::<Vec<_>>())?;
    let size = index.patch_size;
    let data = match index.task {
        Task::Classification => {
            let labels = entries
                .iter()
                .map(|e| {
                    e.class
                        .map(ClassName::id)
                        .ok_or_else(|| CliError::Data(format!("store entry {} has no class", e.id)))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Dataset::new(x, Targets::Classes(labels))?
        }
        Task::Segmentation => {
            let masks = entries
                .iter()
                .map(|e| Ok(load_mask_png(&dir.join(required(&e.mask, "mask", &e.id)?))?.map(|v| v as f32)))
                .collect::<CliResult<Vec<_>>>()?;
            let y: Tensor<f32> = to_tensor(&masks.iter().collect::<Vec<_>>())?;
            Dataset::new(x, Targets::Dense(y))?
        }
        Task::Detection => {
            let mut dens = Vec::with_capacity(entries.len() * size * size);
            let mut points = Vec::with_capacity(entries.len());
            for e in entries {
                dens.extend(read_density(&dir.join(required(&e.density, "density", &e.id)?), size * size)?);
                let dots = load_dots_csv(&dir.join(required(&e.dots, "dots", &e.id)?), size, size)?;
                points.push(dots.into_iter().map(Dot::to_point).collect::<Vec<Point>>());
            }
            let y = Tensor::new(vec![entries.len(), 1, size, size], dens)?;
            Dataset::new(x, Targets::Dense(y))?.with_points(points)?
        }
    };
    Ok(data)
}
