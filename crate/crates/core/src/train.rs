//! Mini-batch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::loss::{self, LossKind, Target};
use crate::metrics::detection::{detect_peaks, match_detections, MatchStrategy, Point};
use crate::metrics::{accuracy, macro_f1, roc_auc};
use crate::models::{Model, Task};
use crate::nn::params::BN_MOMENTUM;
use crate::nn::Session;
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Scalar, Tensor};

/// Supervision for a whole dataset.
#[derive(Clone, Debug)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    /// `N × 1 × H × W` masks or density maps.
    Dense(Tensor<T>),
}

/// Inputs `N × C × H × W` with their targets.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub targets: Targets<T>,
    /// Annotated dots per sample; detection scoring falls back to peaks of
    /// the target map when absent.
    pub points: Option<Vec<Vec<Point>>>,
}

fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, targets: Targets<T>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let m = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Dense(t) => t.shape()[0],
        };
        if inputs.rank() != 4 || n != m {
            return Err(Error::shape(
                "dataset",
                format!("inputs {:?} vs {m} targets", inputs.shape()),
            ));
        }
        if let Targets::Dense(t) = &targets {
            let (s, d) = (inputs.shape(), t.shape());
            if d.len() != 4 || d[2] != s[2] || d[3] != s[3] {
                return Err(Error::shape("dataset", format!("target {d:?} vs input {s:?}")));
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            points: None,
        })
    }

    pub fn with_points(mut self, points: Vec<Vec<Point>>) -> Result<Self> {
        if points.len() != self.len() {
            return Err(Error::shape("dataset", format!("{} point lists for {} samples", points.len(), self.len())));
        }
        self.points = Some(points);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Targets<T>)> {
        let x = gather(&self.inputs, idx)?;
        let y = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Dense(t) => Targets::Dense(gather(t, idx)?),
        };
        Ok((x, y))
    }
}

/// Peak extraction and matching settings for detection scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub threshold: f64,
    pub min_distance: usize,
    pub radius: f64,
    pub strategy: MatchStrategy,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            threshold: 0.5 * crate::data::density::DensitySurface::peak_value(crate::data::DEFAULT_SIGMA),
            min_distance: 3,
            radius: 6.0,
            strategy: MatchStrategy::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub optim: OptimConfig,
    pub seed: u64,
    pub detect: DetectParams,
    pub seg_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub metric: f64,
}

/// Scores of a full pass over a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub n_samples: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub auc: Option<f64>,
    pub dc: Option<f64>,
    pub mse: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Evaluation {
    /// The per-task figure logged each epoch: accuracy, mean Dice, or
    /// detection F1.
    pub fn headline(&self, task: Task) -> f64 {
        match task {
            Task::Classification => self.accuracy,
            Task::Segmentation => self.dc,
            Task::Detection => self.f1,
        }
        .unwrap_or(f64::NAN)
    }
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        let optimizer = Optimizer::new(config.optim.clone())?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass; returns the sample-weighted mean training loss.
    pub fn train_epoch(&mut self, data: &Dataset<T>) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let (x, y) = data.batch(idx)?;
            let (loss, grads, updates) = {
                let mut s = Session::new(&self.model.store, Mode::Train);
                let xv = s.input(x);
                let out = self.model.forward(&mut s, xv)?;
                let target = match &y {
                    Targets::Classes(c) => Target::Classes(c),
                    Targets::Dense(t) => Target::Dense(t),
                };
                let l = self.config.loss.apply(&mut s.graph, out, &target)?;
                let lv = s.graph.value(l).data()[0].as_f64();
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("loss became {lv} in epoch {}", self.epoch + 1)));
                }
                let grads = s.backward(l)?;
                (lv, grads, s.into_stat_updates())
            };
            self.optimizer.step(&mut self.model.store, &grads)?;
            self.model.store.apply_bn_updates(&updates, BN_MOMENTUM);
            total += loss * idx.len() as f64;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    pub fn evaluate(&self, data: &Dataset<T>) -> Result<Evaluation> {
        evaluate(&self.model, data, &self.config)
    }

    /// Runs `config.epochs` epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        train: &Dataset<T>,
        val: Option<&Dataset<T>>,
        mut on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let train_loss = self.train_epoch(train)?;
            let scored = self.evaluate(val.unwrap_or(train))?;
            let log = EpochLog {
                epoch: self.epoch,
                train_loss,
                val_loss: val.map(|_| scored.loss),
                metric: scored.headline(self.model.spec.task),
            };
            on_epoch(&log, &self.model)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Eval-mode predictions for every sample, batched.
pub fn predict_all<T: Scalar>(model: &Model<T>, inputs: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
    let n = inputs.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut shape = None;
    let mut data = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let y = model.predict(&gather(inputs, chunk)?)?;
        shape.get_or_insert_with(|| y.shape().to_vec());
        data.extend_from_slice(y.data());
    }
    let mut shape = shape.expect("at least one sample");
    shape[0] = n;
    Tensor::new(shape, data)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<Evaluation> {
    let pred = predict_all(model, &data.inputs, cfg.batch_size)?;
    let n = data.len();
    let mut ev = Evaluation {
        n_samples: n,
        ..Default::default()
    };
    ev.loss = {
        let mut g = crate::graph::Graph::<T>::new();
        let p = g.constant(pred.clone());
        let target = match &data.targets {
            Targets::Classes(c) => Target::Classes(c),
            Targets::Dense(t) => Target::Dense(t),
        };
        let l = cfg.loss.apply(&mut g, p, &target)?;
        g.value(l).data()[0].as_f64()
    };
    let p64 = pred.to_f64_vec();
    match (&data.targets, model.spec.task) {
        (Targets::Classes(labels), Task::Classification) => {
            let c = pred.shape()[1];
            let preds: Vec<usize> = p64
                .chunks_exact(c)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                        .0
                })
                .collect();
            ev.accuracy = Some(accuracy(&preds, labels)?);
            ev.macro_f1 = Some(macro_f1(&preds, labels, c)?);
            ev.auc = roc_auc(&p64, labels, c)?.macro_auc;
        }
        (Targets::Dense(t), Task::Segmentation) => {
            let t64 = t.to_f64_vec();
            let per = p64.len() / n;
            let mut dc = 0.0;
            for i in 0..n {
                let sr = loss::binarize(&p64[i * per..(i + 1) * per], cfg.seg_threshold);
                let gt = loss::binarize(&t64[i * per..(i + 1) * per], 0.5);
                dc += loss::dice_coefficient(&sr, &gt)?;
            }
            ev.dc = Some(dc / n as f64);
            ev.mse = Some(loss::mse_value(&p64, &t64)?);
        }
        (Targets::Dense(t), Task::Detection) => {
            let t64 = t.to_f64_vec();
            ev.mse = Some(loss::mse_value(&p64, &t64)?);
            let (h, w) = (pred.shape()[2], pred.shape()[3]);
            let d = &cfg.detect;
            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for i in 0..n {
                let pm = &p64[i * h * w..(i + 1) * h * w];
                let gm = &t64[i * h * w..(i + 1) * h * w];
                let pp = detect_peaks(pm, h, w, d.threshold, d.min_distance);
                let gp: Vec<Point> = match &data.points {
                    Some(pts) => pts[i].clone(),
                    None => detect_peaks(gm, h, w, d.threshold, d.min_distance),
                };
                let r = match_detections(&pp, &gp, d.radius, d.strategy);
                tp += r.tp;
                np += pp.len();
                ng += gp.len();
            }
            let r = crate::metrics::DetectionMatchReport::from_counts(tp, np, ng, Vec::new());
            ev.precision = Some(r.precision);
            ev.recall = Some(r.recall);
            ev.f1 = Some(r.f1);
        }
        _ => return Err(Error::InvalidArgument("targets do not fit the model task".into())),
    }
    Ok(ev)
}
