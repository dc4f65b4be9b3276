//! Run configuration: per-task defaults, overlaid by a JSON file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use nucleo_core::data::{DensitySurface, PadMode, DEFAULT_SIGMA};
use nucleo_core::loss::LossKind;
use nucleo_core::metrics::detection::MatchStrategy;
use nucleo_core::nn::Sharing;
use nucleo_core::optim::{OptimConfig, OptimName};
use nucleo_core::train::{DetectParams, TrainConfig};
use nucleo_core::{ModelKind, ModelSpec, Task};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "NUCLEO_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelKind,
    pub t: usize,
    pub sharing: Sharing,
    pub channel_plan: Vec<usize>,
    pub growth_rate: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub optimizer: OptimConfig,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma: f64,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub split_frac: f64,
    /// Mask binarization level (segmentation) or minimum peak height in
    /// density units (detection).
    pub threshold: f64,
    pub min_distance: usize,
    pub match_radius: f64,
    pub match_strategy: MatchStrategy,
    pub pad: PadMode,
    /// Validation pass frequency in epochs; the last epoch is always scored.
    pub eval_every: usize,
    pub paths: Paths,
}

/// Optional optimizer fields of an overlay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OptimOverlay {
    pub name: Option<OptimName>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

/// A partial configuration, as read from a file or collected from flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverlay {
    pub task: Option<Task>,
    pub model: Option<ModelKind>,
    pub t: Option<usize>,
    pub sharing: Option<Sharing>,
    pub channel_plan: Option<Vec<usize>>,
    pub growth_rate: Option<usize>,
    pub blocks: Option<usize>,
    pub layers_per_block: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimOverlay,
    pub loss: Option<LossKind>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub patch_size: Option<usize>,
    pub patches_per_image: Option<usize>,
    pub split_frac: Option<f64>,
    pub threshold: Option<f64>,
    pub min_distance: Option<usize>,
    pub match_radius: Option<f64>,
    pub match_strategy: Option<MatchStrategy>,
    pub pad: Option<PadMode>,
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub paths: Paths,
}

macro_rules! pick {
    ($flags:expr, $file:expr, $field:ident) => {
        $flags.$field.clone().or_else(|| $file.$field.clone())
    };
}

impl ConfigOverlay {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Fields of `self` win over those of `lower`.
    pub fn over(&self, lower: &ConfigOverlay) -> ConfigOverlay {
        let (f, l) = (self, lower);
        let (fo, lo) = (&f.optimizer, &l.optimizer);
        ConfigOverlay {
            task: pick!(f, l, task),
            model: pick!(f, l, model),
            t: pick!(f, l, t),
            sharing: pick!(f, l, sharing),
            channel_plan: pick!(f, l, channel_plan),
            growth_rate: pick!(f, l, growth_rate),
            blocks: pick!(f, l, blocks),
            layers_per_block: pick!(f, l, layers_per_block),
            optimizer: OptimOverlay {
                name: pick!(fo, lo, name),
                lr: pick!(fo, lo, lr),
                momentum: pick!(fo, lo, momentum),
                weight_decay: pick!(fo, lo, weight_decay),
                beta1: pick!(fo, lo, beta1),
                beta2: pick!(fo, lo, beta2),
                eps: pick!(fo, lo, eps),
            },
            loss: pick!(f, l, loss),
            epochs: pick!(f, l, epochs),
            batch_size: pick!(f, l, batch_size),
            seed: pick!(f, l, seed),
            sigma: pick!(f, l, sigma),
            patch_size: pick!(f, l, patch_size),
            patches_per_image: pick!(f, l, patches_per_image),
            split_frac: pick!(f, l, split_frac),
            threshold: pick!(f, l, threshold),
            min_distance: pick!(f, l, min_distance),
            match_radius: pick!(f, l, match_radius),
            match_strategy: pick!(f, l, match_strategy),
            pad: pick!(f, l, pad),
            eval_every: pick!(f, l, eval_every),
            paths: Paths {
                manifest: pick!(f.paths, l.paths, manifest),
                store: pick!(f.paths, l.paths, store),
                out_dir: pick!(f.paths, l.paths, out_dir),
            },
        }
    }
}

/// Reads the seed fallback from [`SEED_ENV`].
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Training defaults of each task.
    pub fn defaults(task: Task) -> RunConfig {
        let (model, optimizer, loss, epochs, batch_size, patch_size, threshold) = match task {
            Task::Classification => (
                ModelKind::Dcrn,
                OptimConfig::sgd(1e-3, 0.9, 1e-4),
                LossKind::CrossEntropy,
                100,
                32,
                32,
                0.5,
            ),
            Task::Segmentation => (
                ModelKind::R2UNet,
                OptimConfig::adam(2e-4),
                LossKind::SoftDice,
                250,
                16,
                256,
                0.5,
            ),
            Task::Detection => (
                ModelKind::UdNet,
                OptimConfig::adam(2e-4),
                LossKind::Mse,
                500,
                64,
                96,
                0.5 * DensitySurface::peak_value(DEFAULT_SIGMA),
            ),
        };
        let spec = ModelSpec::reference(model);
        RunConfig {
            task,
            model,
            t: spec.t,
            sharing: spec.sharing,
            channel_plan: spec.channel_plan,
            growth_rate: spec.growth_rate,
            blocks: spec.blocks,
            layers_per_block: spec.layers_per_block,
            optimizer,
            loss,
            epochs,
            batch_size,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            patch_size,
            patches_per_image: 200,
            split_frac: 0.8,
            threshold,
            min_distance: 3,
            match_radius: 6.0,
            match_strategy: MatchStrategy::Greedy,
            pad: PadMode::None,
            eval_every: 1,
            paths: Paths::default(),
        }
    }

    /// Merges `flags > file > NUCLEO_SEED > defaults`. The task comes from
    /// the overlays, the model kind, or `task_hint`, in that order.
    pub fn resolve(
        flags: &ConfigOverlay,
        file: Option<&ConfigOverlay>,
        env_seed: Option<u64>,
        task_hint: Option<Task>,
    ) -> Result<RunConfig, CliError> {
        let o = match file {
            Some(f) => flags.over(f),
            None => flags.clone(),
        };
        let task = o
            .task
            .or(o.model.map(ModelKind::task))
            .or(task_hint)
            .ok_or_else(|| CliError::Config("task is not set (use --task or a config file)".into()))?;
        if let Some(hint) = task_hint {
            if hint != task {
                return Err(CliError::Config(format!("configured task {task} but the data is {hint}")));
            }
        }
        let mut c = RunConfig::defaults(task);
        if let Some(m) = o.model {
            if m.task() != task {
                return Err(CliError::Config(format!("model {m} cannot serve task {task}")));
            }
            let spec = ModelSpec::reference(m);
            c.model = m;
            c.t = spec.t;
            c.sharing = spec.sharing;
            c.channel_plan = spec.channel_plan;
        }
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = o.$field.clone() { c.$field = v; } )* };
        }
        set!(
            t,
            sharing,
            channel_plan,
            growth_rate,
            blocks,
            layers_per_block,
            loss,
            epochs,
            batch_size,
            patch_size,
            patches_per_image,
            split_frac,
            min_distance,
            match_radius,
            match_strategy,
            pad,
            eval_every
        );
        let oo = &o.optimizer;
        if let Some(name) = oo.name {
            if name != c.optimizer.name {
                let lr = c.optimizer.lr;
                c.optimizer = match name {
                    OptimName::Sgd => OptimConfig::sgd(lr, 0.9, 0.0),
                    OptimName::Adam => OptimConfig::adam(lr),
                };
            }
        }
        let opt = &mut c.optimizer;
        macro_rules! set_opt {
            ($($field:ident),*) => { $( if let Some(v) = oo.$field { opt.$field = v; } )* };
        }
        set_opt!(lr, momentum, weight_decay, beta1, beta2, eps);
        if let Some(s) = o.sigma {
            c.sigma = s;
            if task == Task::Detection {
                c.threshold = 0.5 * DensitySurface::peak_value(s);
            }
        }
        if let Some(th) = o.threshold {
            c.threshold = th;
        }
        c.seed = o.seed.or(env_seed).unwrap_or(0);
        c.paths = o.paths.clone();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.optimizer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model_spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be ≥ 1".into());
        }
        if self.patch_size == 0 || self.patches_per_image == 0 {
            return bad("patch_size and patches_per_image must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.split_frac) {
            return bad(format!("split_frac {} outside [0, 1]", self.split_frac));
        }
        if !(self.sigma > 0.0) || !(self.threshold > 0.0) || !(self.match_radius > 0.0) {
            return bad("sigma, threshold and match_radius must be positive".into());
        }
        if self.model.is_unet() {
            let levels = self.channel_plan.len() / 2;
            let multiple = 1usize << levels.saturating_sub(1);
            if self.patch_size % multiple != 0 {
                return bad(format!(
                    "patch_size {} must be a multiple of {multiple} for a {levels}-level plan",
                    self.patch_size
                ));
            }
        }
        let loss_ok = matches!(
            (self.task, self.loss),
            (Task::Classification, LossKind::CrossEntropy)
                | (Task::Segmentation, LossKind::SoftDice | LossKind::Mse)
                | (Task::Detection, LossKind::Mse)
        );
        if !loss_ok {
            return bad(format!("loss {:?} does not fit task {}", self.loss, self.task));
        }
        Ok(())
    }

    /// Classifiers read RGB, U-Nets read one luminance channel.
    pub fn grayscale(&self) -> bool {
        self.task != Task::Classification
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::reference(self.model)
            .with_t(self.t)
            .with_sharing(self.sharing);
        if self.model.is_unet() {
            spec = spec.with_plan(&self.channel_plan);
        } else {
            spec.growth_rate = self.growth_rate;
            spec.blocks = self.blocks;
            spec.layers_per_block = self.layers_per_block;
            spec.input_size = self.patch_size;
        }
        spec
    }

    pub fn detect_params(&self) -> DetectParams {
        DetectParams {
            threshold: self.threshold,
            min_distance: self.min_distance,
            radius: self.match_radius,
            strategy: self.match_strategy,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss,
            optim: self.optimizer.clone(),
            seed: self.seed,
            detect: self.detect_params(),
            seg_threshold: if self.task == Task::Segmentation { self.threshold } else { 0.5 },
        }
    }
}
