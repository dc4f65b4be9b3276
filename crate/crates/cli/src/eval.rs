//! `eval`: scores a checkpoint on a store (per patch) or a manifest (per
//! whole image, from stitched tile predictions). Never writes files.

use std::path::Path;

use nucleo_core::data::{dots_to_density, load_dots_csv, load_mask_png, load_png, normalize, Dot, Label, Manifest};
use nucleo_core::loss::{binarize, dice_coefficient};
use nucleo_core::metrics::detection::{detect_peaks, match_detections, DetectionMatchReport, Point};
use nucleo_core::metrics::{accuracy, macro_f1, roc_auc, MetricReport};
use nucleo_core::train::{evaluate, Evaluation};
use nucleo_core::{Model, Task};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::infer::{predict_dense, predict_tiles};
use crate::store::{load_dataset, StoreIndex};
use crate::train::ModelFile;

/// Which store entries to score, using the training run's split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    Train,
    Val,
}

fn report(mf: &ModelFile, ev: &Evaluation) -> MetricReport {
    let mut r = MetricReport::empty(mf.config.task, mf.config.model, ev.n_samples, mf.config.seed);
    r.dc = ev.dc;
    r.mse = ev.mse;
    r.accuracy = ev.accuracy;
    r.macro_f1 = ev.macro_f1;
    r.auc = ev.auc;
    r.precision = ev.precision;
    r.recall = ev.recall;
    r.f1 = ev.f1;
    r
}

pub fn eval_store(mf: &ModelFile, model: &Model<f32>, store_dir: &Path, subset: Subset) -> CliResult<MetricReport> {
    let index = StoreIndex::load(store_dir)?;
    if index.task != mf.config.task {
        return Err(CliError::Config(format!(
            "checkpoint is a {} model but the store holds {} data",
            mf.config.task, index.task
        )));
    }
    let entries = match subset {
        Subset::All => index.entries.iter().collect(),
        Subset::Train => index.split(mf.config.split_frac, mf.config.seed)?.0,
        Subset::Val => index.split(mf.config.split_frac, mf.config.seed)?.1,
    };
    let data = load_dataset(store_dir, &index, &entries)?;
    let ev = evaluate(model, &data, &mf.config.train_config())?;
    Ok(report(mf, &ev))
}

pub fn eval_manifest(mf: &ModelFile, model: &Model<f32>, manifest_path: &Path) -> CliResult<MetricReport> {
    let cfg = &mf.config;
    let manifest = Manifest::load(manifest_path)?;
    if manifest.task != cfg.task {
        return Err(CliError::Config(format!(
            "checkpoint is a {} model but the manifest lists {} samples",
            cfg.task, manifest.task
        )));
    }
    let n = manifest.samples.len();
    let mut ev = Evaluation {
        n_samples: n,
        ..Default::default()
    };
    match cfg.task {
        Task::Classification => {
            let (mut scores, mut labels) = (Vec::new(), Vec::new());
            for s in &manifest.samples {
                let Label::Class(class) = s.label else { unreachable!("validated manifest") };
                let img = normalize(&load_png(&s.image)?, cfg.grayscale());
                for (_, _, probs) in predict_tiles(model, &img, cfg.patch_size, cfg.batch_size)
                    .map_err(|e| CliError::Data(format!("{}: {e}", s.image.display())))?
                {
                    scores.extend(probs);
                    labels.push(class.id());
                }
            }
            let c = scores.len() / labels.len();
            let preds: Vec<usize> = scores
                .chunks_exact(c)
                .map(|row| (0..c).fold(0, |b, i| if row[i] > row[b] { i } else { b }))
                .collect();
            ev.accuracy = Some(accuracy(&preds, &labels)?);
            ev.macro_f1 = Some(macro_f1(&preds, &labels, c)?);
            ev.auc = roc_auc(&scores, &labels, c)?.macro_auc;
            ev.n_samples = labels.len();
        }
        Task::Segmentation => {
            let (mut dc, mut se, mut count) = (0.0, 0.0, 0usize);
            for s in &manifest.samples {
                let Label::Mask(mp) = &s.label else { unreachable!("validated manifest") };
                let img = normalize(&load_png(&s.image)?, true);
                let mask = load_mask_png(mp)?;
                let pred = predict_dense(model, &img, cfg.patch_size, cfg.batch_size)?;
                let p: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
                let gt: Vec<bool> = mask.data.iter().map(|&v| v != 0).collect();
                dc += dice_coefficient(&binarize(&pred.data, cfg.threshold), &gt)?;
                se += p.iter().zip(&gt).map(|(a, &b)| (a - b as u8 as f64).powi(2)).sum::<f64>();
                count += p.len();
            }
            ev.dc = Some(dc / n as f64);
            ev.mse = Some(se / count as f64);
        }
        Task::Detection => {
            let d = cfg.detect_params();
            let (mut se, mut count) = (0.0, 0usize);
            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for s in &manifest.samples {
                let Label::Dots(dp) = &s.label else { unreachable!("validated manifest") };
                let img = normalize(&load_png(&s.image)?, true);
                let dots = load_dots_csv(dp, img.width, img.height)?;
                let target = dots_to_density(&dots, img.width, img.height, cfg.sigma)?;
                let pred = predict_dense(model, &img, cfg.patch_size, cfg.batch_size)?;
                let p: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
                se += p.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                count += p.len();
                let peaks = detect_peaks(&p, img.height, img.width, d.threshold, d.min_distance);
                let gt: Vec<Point> = dots.iter().copied().map(Dot::to_point).collect();
                let r = match_detections(&peaks, &gt, d.radius, d.strategy);
                tp += r.tp;
                np += peaks.len();
                ng += gt.len();
            }
            let r = DetectionMatchReport::from_counts(tp, np, ng, Vec::new());
            ev.mse = Some(se / count as f64);
            ev.precision = Some(r.precision);
            ev.recall = Some(r.recall);
            ev.f1 = Some(r.f1);
        }
    }
    Ok(report(mf, &ev))
}
