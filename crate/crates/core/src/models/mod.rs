//! The four architectures: DenseNet and DCRN classifiers, R2U-Net
//! segmenter and UD-Net density regressor.

pub mod checkpoint;
pub mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use spec::{Head, ModelKind, ModelSpec, Task, Upsample, REFERENCE_PLAN};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{
    BatchNorm, Conv2d, DcrcBlockParams, Dense, ParamBuilder, ParamStore, RruParams, Session,
    TransitionParams, UnitKind, UpConv,
};
use crate::tensor::{Scalar, Tensor};

/// Scale applied to the He-initialized output kernel of a linear density
/// head, so initial predictions are near the magnitude of density targets.
pub const DENSITY_HEAD_INIT: f64 = 0.01;

/// Stem conv → dense blocks separated by transitions → BN → ReLU → head →
/// softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub stem: Conv2d,
    pub blocks: Vec<DcrcBlockParams>,
    pub transitions: Vec<TransitionParams>,
    pub final_bn: BatchNorm,
    pub head: Head,
    pub fc: Dense,
}

impl Classifier {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, spec: &ModelSpec) -> Result<Self> {
        let kind = match spec.kind {
            ModelKind::DenseNet => UnitKind::Feedforward,
            _ => UnitKind::Recurrent {
                t: spec.t,
                sharing: spec.sharing,
            },
        };
        let stem = Conv2d::build(b, "stem", spec.in_channels, spec.stem_channels, 3, true)?;
        let mut channels = spec.stem_channels;
        let mut size = spec.input_size;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for i in 0..spec.blocks {
            let block = DcrcBlockParams::build(
                b,
                &format!("block{i}"),
                channels,
                spec.layers_per_block,
                spec.growth_rate,
                kind,
            )?;
            channels = block.out_channels();
            blocks.push(block);
            if i + 1 < spec.blocks {
                transitions.push(TransitionParams::build(b, &format!("transition{i}"), channels, channels)?);
                size = size.div_ceil(2);
            }
        }
        let final_bn = BatchNorm::build(b, "final_bn", channels)?;
        let fin = match spec.head {
            Head::Gap => channels,
            Head::Dense => channels * size * size,
        };
        let fc = Dense::build(b, "fc", fin, spec.num_classes)?;
        Ok(Classifier {
            stem,
            blocks,
            transitions,
            final_bn,
            head: spec.head,
            fc,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(s, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(s, h)?;
            if let Some(tr) = self.transitions.get(i) {
                h = tr.forward(s, h)?;
            }
        }
        let h = self.final_bn.forward_relu(s, h)?;
        let features = match self.head {
            Head::Gap => s.graph.global_avg_pool(h)?,
            Head::Dense => {
                let shape = s.graph.shape(h).to_vec();
                let flat: usize = shape[1..].iter().product();
                s.graph.reshape(h, &[shape[0], flat])?
            }
        };
        let logits = self.fc.forward(s, features)?;
        s.graph.softmax(logits)
    }
}

#[derive(Clone, Debug)]
pub enum UpStage {
    Transpose(UpConv),
    NearestConv(Conv2d),
}

impl UpStage {
    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            UpStage::Transpose(up) => up.forward(s, x),
            UpStage::NearestConv(conv) => {
                let u = s.graph.upsample_nearest2(x)?;
                conv.forward(s, u)
            }
        }
    }
}

/// Encoder of RRUs with 2×2 max pooling between levels; decoder of up-conv,
/// skip concatenation and RRU; final 1×1 conv to one channel.
#[derive(Clone, Debug)]
pub struct UNet {
    pub encoder: Vec<RruParams>,
    pub decoder: Vec<(UpStage, RruParams)>,
    pub out_conv: Conv2d,
    pub sigmoid: bool,
}

impl UNet {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, spec: &ModelSpec) -> Result<Self> {
        let plan = &spec.channel_plan;
        let levels = spec.levels();
        let mut encoder = Vec::with_capacity(levels);
        let mut cin = plan[0];
        for (i, &w) in plan[1..=levels].iter().enumerate() {
            encoder.push(RruParams::build(b, &format!("enc{i}"), cin, w, spec.t, spec.sharing)?);
            cin = w;
        }
        let mut decoder = Vec::with_capacity(levels - 1);
        for (i, &w) in plan[levels + 1..plan.len() - 1].iter().enumerate() {
            let up = match spec.upsample {
                Upsample::Transpose => UpStage::Transpose(UpConv::build(b, &format!("up{i}"), cin, w)?),
                Upsample::NearestConv => {
                    UpStage::NearestConv(Conv2d::build(b, &format!("up{i}"), cin, w, 1, true)?)
                }
            };
            let rru = RruParams::build(b, &format!("dec{i}"), 2 * w, w, spec.t, spec.sharing)?;
            decoder.push((up, rru));
            cin = w;
        }
        let out_conv = Conv2d::build(b, "out", cin, plan[plan.len() - 1], 1, true)?;
        let sigmoid = spec.kind == ModelKind::R2UNet;
        if !sigmoid {
            b.rescale(out_conv.weight, DENSITY_HEAD_INIT);
        }
        Ok(UNet {
            encoder,
            decoder,
            out_conv,
            sigmoid,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (i, rru) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = s.graph.max_pool2(h)?;
            }
            h = rru.forward(s, h)?;
            skips.push(h);
        }
        skips.pop();
        for (up, rru) in &self.decoder {
            let u = up.forward(s, h)?;
            let skip = skips.pop().expect("decoder depth matches encoder");
            let cat = s.graph.concat(&[skip, u])?;
            h = rru.forward(s, cat)?;
        }
        let out = self.out_conv.forward(s, h)?;
        Ok(if self.sigmoid { s.graph.sigmoid(out) } else { out })
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Classifier(Classifier),
    UNet(UNet),
}

/// An architecture together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub net: Network,
}

impl<T: Scalar> Model<T> {
    /// Instantiates `spec` with He-normal kernels drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let net = if spec.kind.is_unet() {
            Network::UNet(UNet::build(&mut b, spec)?)
        } else {
            Network::Classifier(Classifier::build(&mut b, spec)?)
        };
        Ok(Model {
            spec: spec.clone(),
            store,
            net,
        })
    }

    /// Exact number of learnable scalars, BN gamma/beta included.
    pub fn param_count(&self) -> usize {
        self.store.learnable_count()
    }

    /// Smallest spatial multiple accepted by a U-Net (`2^(levels − 1)`).
    pub fn spatial_multiple(&self) -> usize {
        match self.net {
            Network::UNet(ref u) => 1 << (u.encoder.len() - 1),
            Network::Classifier(_) => 1,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::shape("model", format!("expected N×C×H×W input, got {shape:?}")));
        }
        if shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "model",
                format!("input channels (axis 1) {} != spec in_channels {}", shape[1], self.spec.in_channels),
            ));
        }
        let m = self.spatial_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::shape(
                "model",
                format!("spatial axes (2,3) {}×{} must be multiples of {m}", shape[2], shape[3]),
            ));
        }
        if self.spec.head == Head::Dense
            && !self.spec.kind.is_unet()
            && (shape[2] != self.spec.input_size || shape[3] != self.spec.input_size)
        {
            return Err(Error::shape(
                "model",
                format!("dense head expects {0}×{0} input", self.spec.input_size),
            ));
        }
        Ok(())
    }

    /// Records the forward pass. Classification yields `N×classes`
    /// probabilities, segmentation per-pixel probabilities, detection the raw
    /// (unclamped) density estimate.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.check_input(s.graph.shape(x))?;
        match &self.net {
            Network::Classifier(c) => c.forward(s, x),
            Network::UNet(u) => u.forward(s, x),
        }
    }

    /// Eval-mode inference. Density outputs are clamped to be non-negative.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::inference(&self.store);
        let xv = s.input(x.clone());
        let y = self.forward(&mut s, xv)?;
        let out = s.graph.value(y).clone();
        Ok(if self.spec.kind == ModelKind::UdNet {
            out.map(|v| v.max(T::zero()))
        } else {
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::nn::Sharing;

    #[test]
    fn single_conv_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        Conv2d::build(&mut b, "c", 1, 16, 3, true).unwrap();
        assert_eq!(store.learnable_count(), 3 * 3 * 16 + 16);
    }

    #[test]
    fn param_names_are_unique() {
        for kind in [ModelKind::DenseNet, ModelKind::Dcrn, ModelKind::R2UNet, ModelKind::UdNet] {
            let m = Model::<f32>::build(&ModelSpec::reference(kind), 1).unwrap();
            let mut names: Vec<_> = m.store.entries().iter().map(|e| e.name.as_str()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(n, names.len());
        }
    }

    #[test]
    fn classifier_rows_sum_to_one() {
        let mut spec = ModelSpec::reference(ModelKind::Dcrn);
        spec.blocks = 2;
        spec.input_size = 8;
        let m = Model::<f64>::build(&spec, 3).unwrap();
        let x = Tensor::from_f64(vec![2, 3, 8, 8], &(0..384).map(|i| ((i * 37) % 17) as f64 / 17.0).collect::<Vec<_>>()).unwrap();
        let mut s = Session::new(&m.store, Mode::Train);
        let xv = s.input(x);
        let y = m.forward(&mut s, xv).unwrap();
        let p = s.graph.value(y);
        assert_eq!(p.shape(), &[2, 4]);
        for r in 0..2 {
            let sum: f64 = p.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unet_rejects_bad_input() {
        let spec = ModelSpec::reference(ModelKind::R2UNet).with_plan(&[1, 4, 8, 4, 1]);
        let m = Model::<f64>::build(&spec, 0).unwrap();
        assert!(m.predict(&Tensor::zeros(vec![1, 2, 8, 8])).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 1, 7, 8])).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 1, 6, 8])).is_ok());
    }

    #[test]
    fn nearest_upsampling_variant_builds() {
        let mut spec = ModelSpec::reference(ModelKind::UdNet)
            .with_plan(&[1, 4, 8, 4, 1])
            .with_sharing(Sharing::Shared);
        spec.upsample = Upsample::NearestConv;
        let m = Model::<f32>::build(&spec, 0).unwrap();
        let y = m.predict(&Tensor::ones(vec![1, 1, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }
}
