//! Named finite-difference checks covering every primitive and composite
//! block, run by `nucleo selftest` and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check, check_session, random_projection, random_tensor, GradCheckConfig, GradReport};
use crate::graph::{Graph, Mode, Var};
use crate::loss;
use crate::models::{Model, ModelKind, ModelSpec};
use crate::nn::{
    DcrcBlockParams, ParamBuilder, ParamStore, RclParams, RruParams, Session, Sharing, TransitionParams, UnitKind,
};
use crate::tensor::Tensor;

type Runner = Box<dyn Fn(&GradCheckConfig) -> Result<GradReport>>;

/// Step used for composite blocks and models. Their batch-norm layers are
/// curved enough that the `O(eps²)` truncation error of a `1e-3` step alone
/// approaches the tolerance.
pub const COMPOSITE_EPS: f64 = 1e-4;

pub struct GradCase {
    pub name: String,
    pub composite: bool,
    run: Runner,
}

impl GradCase {
    pub fn run(&self, cfg: &GradCheckConfig) -> Result<GradReport> {
        (self.run)(cfg)
    }

    /// Default probe settings, with [`COMPOSITE_EPS`] for composite cases.
    pub fn config(&self) -> GradCheckConfig {
        let mut cfg = GradCheckConfig::default();
        if self.composite {
            cfg.eps = COMPOSITE_EPS;
        }
        cfg
    }

    pub fn run_default(&self) -> Result<GradReport> {
        self.run(&self.config())
    }
}

fn case(name: impl Into<String>, run: impl Fn(&GradCheckConfig) -> Result<GradReport> + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        composite: false,
        run: Box::new(run),
    }
}

/// A check of a graph function of `inputs`, projected to a scalar.
fn prim(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Clone + 'static,
) -> GradCase {
    case(name, move |cfg| {
        let f = f.clone();
        check(&inputs, cfg, move |g, v| {
            let y = f(g, v)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                random_projection(g, y, 17)
            }
        })
    })
}

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, seed)
}

fn pos(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 0.5, 2.0, seed)
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        prim("conv2d pad=1", vec![rt(&[2, 3, 6, 6], 1), rt(&[4, 3, 3, 3], 2), rt(&[4], 3)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1)
        }),
        prim("conv2d pad=0 no bias", vec![rt(&[1, 2, 7, 5], 4), rt(&[3, 2, 3, 3], 5)], |g, v| {
            g.conv2d(v[0], v[1], None, 0)
        }),
        prim("conv2d 1x1", vec![rt(&[2, 5, 4, 4], 6), rt(&[3, 5, 1, 1], 7), rt(&[3], 8)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 0)
        }),
        prim(
            "conv2d_transpose stride=2",
            vec![rt(&[2, 3, 4, 4], 9), rt(&[3, 2, 2, 2], 10), rt(&[2], 11)],
            |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), 2),
        ),
        prim("add", vec![rt(&[4, 30], 12), rt(&[4, 30], 13)], |g, v| g.add(v[0], v[1])),
        prim("sub", vec![rt(&[4, 30], 14), rt(&[4, 30], 15)], |g, v| g.sub(v[0], v[1])),
        prim("mul", vec![rt(&[4, 30], 16), rt(&[4, 30], 17)], |g, v| g.mul(v[0], v[1])),
        prim("div", vec![rt(&[4, 30], 18), pos(&[4, 30], 19)], |g, v| g.div(v[0], v[1])),
        prim("add_scalar", vec![rt(&[120], 20)], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        prim("mul_scalar", vec![rt(&[120], 21)], |g, v| Ok(g.mul_scalar(v[0], -1.7))),
        prim("add_channel_bias", vec![rt(&[2, 5, 3, 4], 22), rt(&[5], 23)], |g, v| {
            g.add_channel_bias(v[0], v[1])
        }),
        prim("concat", vec![rt(&[2, 2, 4, 4], 24), rt(&[2, 3, 4, 4], 25)], |g, v| g.concat(&[v[0], v[1]])),
        prim("slice_channels", vec![rt(&[2, 6, 3, 3], 26)], |g, v| g.slice_channels(v[0], 1, 3)),
        prim("reshape", vec![rt(&[3, 4, 10], 27)], |g, v| g.reshape(v[0], &[12, 10])),
        prim("pad_to_even", vec![rt(&[2, 3, 5, 7], 28)], |g, v| g.pad_to_even(v[0])),
        prim("upsample_nearest2", vec![rt(&[2, 3, 4, 5], 29)], |g, v| g.upsample_nearest2(v[0])),
        prim("relu", vec![rt(&[4, 40], 30)], |g, v| Ok(g.relu(v[0]))),
        prim("sigmoid", vec![random_tensor(&[4, 40], -4.0, 4.0, 31)], |g, v| Ok(g.sigmoid(v[0]))),
        prim("softmax", vec![random_tensor(&[3, 5, 3, 3], -2.0, 2.0, 32)], |g, v| g.softmax(v[0])),
        prim("log", vec![pos(&[4, 40], 33)], |g, v| Ok(g.log(v[0]))),
        prim("clamp_min", vec![rt(&[4, 40], 34)], |g, v| Ok(g.clamp_min(v[0], 0.1))),
        prim("sum", vec![rt(&[5, 30], 35)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
        prim("mean", vec![rt(&[5, 30], 36)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        }),
        prim("max_pool2", vec![rt(&[2, 3, 6, 6], 37)], |g, v| g.max_pool2(v[0])),
        prim("avg_pool2", vec![rt(&[2, 3, 6, 6], 38)], |g, v| g.avg_pool2(v[0])),
        prim("global_avg_pool", vec![rt(&[3, 4, 3, 3], 39)], |g, v| g.global_avg_pool(v[0])),
        prim(
            "batch_norm train",
            vec![random_tensor(&[4, 3, 3, 3], -2.0, 3.0, 40), pos(&[3], 41), rt(&[3], 42)],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], Mode::Train, (&[0.0; 3], &[1.0; 3]), 1e-5)?;
                Ok(y)
            },
        ),
        prim(
            "batch_norm eval",
            vec![rt(&[4, 3, 3, 3], 43), pos(&[3], 44), rt(&[3], 45)],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], Mode::Eval, (&[0.2, -0.1, 0.0], &[0.5, 1.5, 2.0]), 1e-5)?;
                Ok(y)
            },
        ),
        prim("matmul", vec![rt(&[7, 8], 46), rt(&[8, 6], 47)], |g, v| g.matmul(v[0], v[1])),
        prim("cross_entropy", vec![random_tensor(&[28, 4, 1, 1], -2.0, 2.0, 48)], |g, v| {
            let x = g.reshape(v[0], &[28, 4])?;
            let p = g.softmax(x)?;
            let labels: Vec<usize> = (0..28).map(|i| (i * 3 + i / 4) % 4).collect();
            loss::cross_entropy(g, p, &labels)
        }),
        prim(
            "soft_dice_loss",
            vec![random_tensor(&[2, 1, 8, 8], 0.05, 0.95, 49)],
            |g, v| {
                let gt = random_tensor(&[2, 1, 8, 8], 0.0, 1.0, 50).map(|x| (x > 0.5) as u8 as f64);
                let t = g.constant(gt);
                loss::soft_dice_loss(g, v[0], t)
            },
        ),
        prim("mse", vec![rt(&[2, 1, 8, 8], 51), rt(&[2, 1, 8, 8], 52)], |g, v| loss::mse(g, v[0], v[1])),
    ]
}

/// Store + forward for a block check; BN runs in train mode.
fn block(
    name: String,
    input: Tensor<f64>,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<Box<dyn Fn(&mut Session<'_, f64>, Var) -> Result<Var>>>,
) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let fwd = {
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        build(&mut b)?
    };
    perturb_affine(&mut store, 99);
    let fwd = std::rc::Rc::new(fwd);
    Ok(case(name, move |cfg| {
        let fwd = fwd.clone();
        check_session(&store, &input, Mode::Train, cfg, move |s, x| {
            let y = fwd(s, x)?;
            random_projection(&mut s.graph, y, 5)
        })
    }))
}

/// Moves biases and BN affine parameters off their initial constants so the
/// check exercises generic values.
fn perturb_affine(store: &mut ParamStore<f64>, seed: u64) {
    use crate::nn::ParamKind;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let e = store.get_mut(id);
        let n = e.value.len();
        let r = random_tensor(&[n], -0.3, 0.3, seed + k as u64);
        match e.kind {
            ParamKind::Bias | ParamKind::BnBeta => {
                e.value.data_mut().copy_from_slice(r.data());
            }
            ParamKind::BnGamma => {
                for (v, d) in e.value.data_mut().iter_mut().zip(r.data()) {
                    *v = 1.0 + d;
                }
            }
            _ => {}
        }
    }
}

pub fn block_cases() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for sharing in [Sharing::Shared, Sharing::PerStep] {
        for t in 0..=3 {
            out.push(block(
                format!("rcl t={t} {sharing:?}"),
                rt(&[2, 2, 5, 5], 60 + t as u64),
                move |b| {
                    let p = RclParams::build(b, "rcl", 2, 3, t, sharing)?;
                    Ok(Box::new(move |s, x| p.forward(s, x)))
                },
            )?);
        }
    }
    out.push(block("rru".into(), rt(&[2, 2, 6, 6], 70), |b| {
        let p = RruParams::build(b, "rru", 2, 3, 2, Sharing::PerStep)?;
        Ok(Box::new(move |s, x| p.forward(s, x)))
    })?);
    out.push(block("dcrc recurrent".into(), rt(&[2, 3, 4, 4], 71), |b| {
        let kind = UnitKind::Recurrent {
            t: 2,
            sharing: Sharing::Shared,
        };
        let p = DcrcBlockParams::build(b, "dcrc", 3, 2, 2, kind)?;
        Ok(Box::new(move |s, x| p.forward(s, x)))
    })?);
    out.push(block("dcrc feedforward".into(), rt(&[2, 3, 4, 4], 72), |b| {
        let p = DcrcBlockParams::build(b, "dense", 3, 2, 2, UnitKind::Feedforward)?;
        Ok(Box::new(move |s, x| p.forward(s, x)))
    })?);
    out.push(block("transition".into(), rt(&[2, 4, 6, 6], 73), |b| {
        let p = TransitionParams::build(b, "tr", 4, 3)?;
        Ok(Box::new(move |s, x| p.forward(s, x)))
    })?);
    out.push(block("transition odd input".into(), rt(&[2, 3, 5, 5], 74), |b| {
        let p = TransitionParams::build(b, "tr", 3, 3)?;
        Ok(Box::new(move |s, x| p.forward(s, x)))
    })?);
    out.push(model_case(
        "r2unet 1-4-8-4-1 soft dice",
        ModelSpec::reference(ModelKind::R2UNet).with_plan(&[1, 4, 8, 4, 1]),
        &[2, 1, 8, 8],
    )?);
    out.push(model_case(
        "udnet 1-4-8-4-1 mse",
        ModelSpec::reference(ModelKind::UdNet).with_plan(&[1, 4, 8, 4, 1]),
        &[2, 1, 8, 8],
    )?);
    let mut cls = ModelSpec::reference(ModelKind::Dcrn);
    cls.blocks = 2;
    cls.layers_per_block = 2;
    cls.growth_rate = 3;
    cls.stem_channels = 4;
    cls.input_size = 6;
    out.push(model_case("dcrn 2 blocks cross entropy", cls, &[4, 3, 6, 6])?);
    for c in &mut out {
        c.composite = true;
    }
    Ok(out)
}

fn model_case(name: &str, spec: ModelSpec, shape: &[usize]) -> Result<GradCase> {
    let mut model = Model::<f64>::build(&spec, 11)?;
    perturb_affine(&mut model.store, 123);
    let input = random_tensor(shape, 0.0, 1.0, 77);
    let n = shape[0];
    let task = spec.task;
    Ok(case(name, move |cfg| {
        let target = random_tensor(&[n, 1, shape_hw(&input).0, shape_hw(&input).1], 0.0, 1.0, 78);
        check_session(&model.store, &input, Mode::Train, cfg, |s, x| {
            let y = model.forward(s, x)?;
            match task {
                crate::models::Task::Classification => {
                    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
                    loss::cross_entropy(&mut s.graph, y, &labels)
                }
                crate::models::Task::Segmentation => {
                    let t = s.graph.constant(target.map(|v| (v > 0.5) as u8 as f64));
                    loss::soft_dice_loss(&mut s.graph, y, t)
                }
                crate::models::Task::Detection => {
                    let t = s.graph.constant(target.clone());
                    loss::mse(&mut s.graph, y, t)
                }
            }
        })
    }))
}

fn shape_hw(t: &Tensor<f64>) -> (usize, usize) {
    (t.shape()[2], t.shape()[3])
}

pub fn all_cases() -> Result<Vec<GradCase>> {
    let mut v = primitive_cases();
    v.extend(block_cases()?);
    Ok(v)
}
