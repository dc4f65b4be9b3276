use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nucleo_cli::config::{env_seed, ConfigOverlay, OptimOverlay, Paths, RunConfig};
use nucleo_cli::eval::{eval_manifest, eval_store, Subset};
use nucleo_cli::predict::{predict, Prediction};
use nucleo_cli::store::{prepare, StoreIndex};
use nucleo_cli::train::{train, ModelFile};
use nucleo_cli::{synth, CliError, CliResult};
use nucleo_core::data::{Manifest, PadMode};
use nucleo_core::loss::LossKind;
use nucleo_core::metrics::detection::MatchStrategy;
use nucleo_core::nn::Sharing;
use nucleo_core::optim::OptimName;
use nucleo_core::{ModelKind, Task};
use serde::de::DeserializeOwned;

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn parse_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(name = "nucleo", version, about = "Train and apply recurrent-convolutional nuclei models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every run-configured command; each overrides the
/// `--config` file, which overrides task defaults.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_name::<Task>)]
    task: Option<Task>,
    /// densenet | dcrn | r2unet | udnet
    #[arg(long, value_parser = parse_name::<ModelKind>)]
    model: Option<ModelKind>,
    /// Recurrent unfolding steps
    #[arg(long)]
    t: Option<usize>,
    /// shared | per_step
    #[arg(long, value_parser = parse_name::<Sharing>)]
    sharing: Option<Sharing>,
    /// Comma-separated U-Net widths, e.g. 1,8,16,32,16,8,1
    #[arg(long, value_delimiter = ',')]
    plan: Option<Vec<usize>>,
    #[arg(long)]
    growth_rate: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    layers_per_block: Option<usize>,
    /// sgd | adam
    #[arg(long, value_parser = parse_name::<OptimName>)]
    optimizer: Option<OptimName>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// cross_entropy | soft_dice | mse
    #[arg(long, value_parser = parse_name::<LossKind>)]
    loss: Option<LossKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Falls back to NUCLEO_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Gaussian std of density targets, px
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    split_frac: Option<f64>,
    /// Mask cut (segmentation) or minimum peak density (detection)
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_distance: Option<usize>,
    #[arg(long)]
    match_radius: Option<f64>,
    /// greedy | optimal
    #[arg(long, value_parser = parse_name::<MatchStrategy>)]
    match_strategy: Option<MatchStrategy>,
    /// none | reflect
    #[arg(long, value_parser = parse_name::<PadMode>)]
    pad: Option<PadMode>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl Overrides {
    fn overlay(&self, paths: Paths) -> ConfigOverlay {
        ConfigOverlay {
            task: self.task,
            model: self.model,
            t: self.t,
            sharing: self.sharing,
            channel_plan: self.plan.clone(),
            growth_rate: self.growth_rate,
            blocks: self.blocks,
            layers_per_block: self.layers_per_block,
            optimizer: OptimOverlay {
                name: self.optimizer,
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            loss: self.loss,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            sigma: self.sigma,
            patch_size: self.patch_size,
            patches_per_image: self.patches_per_image,
            split_frac: self.split_frac,
            threshold: self.threshold,
            min_distance: self.min_distance,
            match_radius: self.match_radius,
            match_strategy: self.match_strategy,
            pad: self.pad,
            eval_every: self.eval_every,
            paths,
        }
    }

    fn file(&self) -> CliResult<Option<ConfigOverlay>> {
        self.config.as_deref().map(ConfigOverlay::load).transpose()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset and its manifest
    Synth {
        #[arg(long, value_parser = parse_name::<Task>)]
        task: Task,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Image side length, px
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract patches and targets from a manifest into a store
    Prepare {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train on a store; writes model.json, metrics.csv, best.ckpt, last.ckpt
    Train {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the JSON metric report of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to model.json beside the checkpoint
        #[arg(long)]
        model_file: Option<PathBuf>,
        /// Score store patches
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
        /// Score whole images from stitched tiles
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Predict on one image and write the task's artifacts
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model_file: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and block
    Selftest,
}

fn require(p: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("{what} path is not set")))
}

fn model_file(explicit: Option<PathBuf>, checkpoint: &Path) -> CliResult<ModelFile> {
    match explicit {
        Some(p) => ModelFile::load(&p),
        None => ModelFile::beside(checkpoint),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            task,
            count,
            size,
            seed,
            out,
        } => {
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let manifest = synth::write_synthetic(task, count, size, seed, &out)?;
            say!("{}", manifest.display());
        }
        Command::Prepare {
            manifest,
            store,
            overrides,
        } => {
            let file = overrides.file()?;
            let file_paths = file.as_ref().map(|f| f.paths.clone()).unwrap_or_default();
            let manifest = require(manifest, &file_paths.manifest, "manifest")?;
            let store = require(store, &file_paths.store, "store")?;
            let task = Manifest::load(&manifest)?.task;
            let flags = overrides.overlay(Paths::default());
            let cfg = RunConfig::resolve(&flags, file.as_ref(), env_seed()?, Some(task))?;
            let index = prepare(&manifest, &store, &cfg)?;
            say!("{} patches from {} samples in {}", index.entries.len(), index.sources().len(), store.display());
        }
        Command::Train { store, out, overrides } => {
            let file = overrides.file()?;
            let file_paths = file.as_ref().map(|f| f.paths.clone()).unwrap_or_default();
            let store = require(store, &file_paths.store, "store")?;
            let out = require(out, &file_paths.out_dir, "output")?;
            let index = StoreIndex::load(&store)?;
            let mut flags = overrides.overlay(Paths {
                manifest: None,
                store: Some(store.clone()),
                out_dir: Some(out.clone()),
            });
            if flags.patch_size.is_none() && file.as_ref().and_then(|f| f.patch_size).is_none() {
                flags.patch_size = Some(index.patch_size);
            }
            let cfg = RunConfig::resolve(&flags, file.as_ref(), env_seed()?, Some(index.task))?;
            let o = train(&store, &out, &cfg)?;
            say!("best metric {} at epoch {} in {}", o.best_metric, o.best_epoch, out.display());
        }
        Command::Eval {
            checkpoint,
            model_file: mf,
            store,
            subset,
            manifest,
        } => {
            let mf = model_file(mf, &checkpoint)?;
            let model = mf.restore(&checkpoint)?;
            let report = match (store, manifest) {
                (Some(s), _) => eval_store(&mf, &model, &s, subset)?,
                (None, Some(m)) => eval_manifest(&mf, &model, &m)?,
                (None, None) => return Err(CliError::Config("eval needs --store or --manifest".into())),
            };
            say!("{}", report.to_json());
        }
        Command::Predict {
            checkpoint,
            model_file: mf,
            image,
            out,
        } => {
            let mf = model_file(mf, &checkpoint)?;
            let model = mf.restore(&checkpoint)?;
            let outcome = predict(&mf, &model, &image, &out)?;
            match &outcome.prediction {
                Prediction::Class(c) => say!("predicted {:?}", c.predicted),
                Prediction::Mask { mask, .. } => {
                    say!("mask {}×{}, {} foreground px", mask.width, mask.height, mask.data.iter().filter(|&&v| v > 0).count())
                }
                Prediction::Density { dots, .. } => say!("{} dots", dots.len()),
            }
            for f in &outcome.files {
                say!("{}", f.display());
            }
        }
        Command::Selftest => {
            nucleo_cli::selftest::selftest(std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
