//! `train`: fits a model on a prepared store and writes its run directory.
//!
//! ```text
//! model.json    ModelFile (architecture + resolved run config)
//! metrics.csv   epoch,train_loss,val_loss,metric
//! best.ckpt     weights of the best validation metric so far
//! last.ckpt     weights after the last finished epoch
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nucleo_core::models::checkpoint;
use nucleo_core::train::Trainer;
use nucleo_core::{Error, Model, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::store::{load_dataset, StoreIndex};

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Everything needed to rebuild a trained model and score it consistently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: ModelSpec,
    pub config: RunConfig,
}

impl ModelFile {
    pub fn load(path: &Path) -> CliResult<ModelFile> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: invalid model file: {e}", path.display())))
    }

    /// The model file next to a checkpoint.
    pub fn beside(checkpoint: &Path) -> CliResult<ModelFile> {
        ModelFile::load(&checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_FILE))
    }

    /// Builds the model and loads `checkpoint` into it.
    pub fn restore(&self, checkpoint: &Path) -> CliResult<Model<f32>> {
        let mut model = Model::build(&self.spec, 0)?;
        checkpoint::load_into(&mut model, checkpoint)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub metric: Option<f64>,
}

impl EpochRecord {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.train_loss, opt(self.val_loss), opt(self.metric))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub out_dir: PathBuf,
}

/// Writes through a sibling temp file so a crash never leaves a torn file.
fn save_atomic(model: &Model<f32>, path: &Path) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    checkpoint::save(model, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn train(store_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let index = StoreIndex::load(store_dir)?;
    if index.task != cfg.task {
        return Err(CliError::Config(format!("store holds {} data, config is {}", index.task, cfg.task)));
    }
    if index.patch_size != cfg.patch_size {
        return Err(CliError::Config(format!(
            "store patches are {} px, config expects {}",
            index.patch_size, cfg.patch_size
        )));
    }
    let (train_entries, val_entries) = index.split(cfg.split_frac, cfg.seed)?;
    let train_set = load_dataset(store_dir, &index, &train_entries)?;
    let val_set = if val_entries.is_empty() {
        None
    } else {
        Some(load_dataset(store_dir, &index, &val_entries)?)
    };
    log::info!(
        "training {} on {} patches, validating on {}",
        cfg.model,
        train_set.len(),
        val_set.as_ref().map_or(0, |v| v.len())
    );

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let spec = cfg.model_spec();
    let file = ModelFile {
        spec: spec.clone(),
        config: cfg.clone(),
    };
    let model_path = out_dir.join(MODEL_FILE);
    fs::write(&model_path, serde_json::to_string_pretty(&file).expect("model file serializes"))
        .map_err(|e| CliError::io(&model_path, e))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut csv = fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut line = |text: &str| writeln!(csv, "{text}").map_err(|e| CliError::io(&metrics_path, e));
    line("epoch,train_loss,val_loss,metric")?;

    let mut trainer = Trainer::new(Model::build(&spec, cfg.seed)?, cfg.train_config())?;
    let (best_path, last_path) = (out_dir.join(BEST_CKPT), out_dir.join(LAST_CKPT));
    save_atomic(&trainer.model, &last_path)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_metric) = (0, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let train_loss = match trainer.train_epoch(&train_set) {
            Ok(l) => l,
            Err(Error::Numeric(m)) => {
                log::error!("{m}; keeping {}", last_path.display());
                return Err(CliError::Numeric(m));
            }
            Err(e) => return Err(e.into()),
        };
        let mut rec = EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            metric: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let scored = trainer.evaluate(val_set.as_ref().unwrap_or(&train_set))?;
            let metric = scored.headline(cfg.task);
            rec.val_loss = val_set.as_ref().map(|_| scored.loss);
            rec.metric = Some(metric);
            if metric > best_metric || best_epoch == 0 {
                best_metric = metric;
                best_epoch = epoch;
                save_atomic(&trainer.model, &best_path)?;
            }
            log::info!("epoch {epoch}: train loss {train_loss:.6} metric {metric:.4}");
        }
        save_atomic(&trainer.model, &last_path)?;
        line(&rec.csv())?;
        records.push(rec);
    }
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_metric,
        out_dir: out_dir.to_path_buf(),
    })
}
