//! Recurrent convolutional layer.
//!
//! The forward convolution of the input is computed once and reused at every
//! unfolding step:
//!
//! ```text
//! h(0) = conv(x, w_f) + b
//! h(s) = conv(x, w_f) + conv(act_{s-1}(h(s-1)), w_r(s)) + b     s = 1..=t
//! out  = act_t(h(t))                                           act = BN → ReLU
//! ```
//!
//! With `t = 2` that is one forward convolution and two recurrent ones. Each
//! step keeps its own BN running statistics. Under [`Sharing::Shared`] the
//! recurrent kernel and the BN gamma/beta are tied across steps, so the
//! parameter count does not depend on `t`; under [`Sharing::PerStep`] each
//! step owns both.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::Var;
use crate::nn::layers::Conv2d;
use crate::nn::params::{BnAffine, BnStats, ParamBuilder, ParamId, Session};
use crate::tensor::Scalar;

/// How recurrent weights are tied across unfolding steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    Shared,
    PerStep,
}

#[derive(Clone, Debug)]
pub struct RclParams {
    pub t: usize,
    pub sharing: Sharing,
    pub forward_conv: Conv2d,
    /// One kernel when shared, `t` kernels when per-step. No bias: `b` lives
    /// on the forward convolution and is added once per step.
    pub recurrent: Vec<ParamId>,
    /// One affine pair when shared, `t + 1` when per-step.
    pub bn_affine: Vec<BnAffine>,
    /// Always `t + 1`, one per applied activation.
    pub bn_stats: Vec<BnStats>,
    pub cin: usize,
    pub cout: usize,
}

impl RclParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        t: usize,
        sharing: Sharing,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let forward_conv = Conv2d::build(b, "wf", cin, cout, 3, true)?;
            let n_rec = match sharing {
                Sharing::Shared => t.min(1),
                Sharing::PerStep => t,
            };
            let recurrent = (0..n_rec)
                .map(|i| b.kernel(&format!("wr{i}.weight"), &[cout, cout, 3, 3], cout * 9))
                .collect::<Result<Vec<_>>>()?;
            let n_affine = match sharing {
                Sharing::Shared => 1,
                Sharing::PerStep => t + 1,
            };
            let bn_affine = (0..n_affine)
                .map(|i| b.bn_affine(&format!("bn{i}"), cout))
                .collect::<Result<Vec<_>>>()?;
            let bn_stats = (0..=t)
                .map(|i| b.bn_stats(&format!("bn_step{i}"), cout))
                .collect::<Result<Vec<_>>>()?;
            Ok(RclParams {
                t,
                sharing,
                forward_conv,
                recurrent,
                bn_affine,
                bn_stats,
                cin,
                cout,
            })
        })
    }

    fn recurrent_kernel(&self, step: usize) -> ParamId {
        match self.sharing {
            Sharing::Shared => self.recurrent[0],
            Sharing::PerStep => self.recurrent[step - 1],
        }
    }

    fn affine(&self, step: usize) -> BnAffine {
        match self.sharing {
            Sharing::Shared => self.bn_affine[0],
            Sharing::PerStep => self.bn_affine[step],
        }
    }

    fn act<T: Scalar>(&self, s: &mut Session<'_, T>, h: Var, step: usize) -> Result<Var> {
        let y = s.batch_norm(h, self.affine(step), self.bn_stats[step])?;
        Ok(s.graph.relu(y))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let feed = self.forward_conv.forward(s, x)?;
        let mut a = self.act(s, feed, 0)?;
        for step in 1..=self.t {
            let w = s.param(self.recurrent_kernel(step));
            let rec = s.graph.conv2d(a, w, None, 1)?;
            let h = s.graph.add(feed, rec)?;
            a = self.act(s, h, step)?;
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::graph::Mode;
    use crate::nn::params::{ParamStore, BN_EPS};
    use crate::tensor::Tensor;

    fn build(cin: usize, cout: usize, t: usize, sharing: Sharing, seed: u64) -> (ParamStore<f64>, RclParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RclParams::build(&mut ParamBuilder::new(&mut store, &mut rng), "rcl", cin, cout, t, sharing).unwrap();
        (store, p)
    }

    fn run(store: &ParamStore<f64>, p: &RclParams, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut s = Session::new(store, mode);
        let xv = s.input(x.clone());
        let y = p.forward(&mut s, xv).unwrap();
        s.graph.value(y).clone()
    }

    #[test]
    fn t0_is_conv_bn_relu() {
        let (store, p) = build(2, 3, 0, Sharing::Shared, 1);
        let x = random_tensor(&[2, 2, 5, 5], -1.0, 1.0, 2);
        let got = run(&store, &p, &x, Mode::Train);
        let mut s = Session::new(&store, Mode::Train);
        let xv = s.input(x);
        let h = p.forward_conv.forward(&mut s, xv).unwrap();
        let h = s.batch_norm(h, p.bn_affine[0], p.bn_stats[0]).unwrap();
        let want = s.graph.relu(h);
        assert_eq!(&got, s.graph.value(want));
        assert!(p.recurrent.is_empty());
    }

    #[test]
    fn zero_recurrent_kernel_reduces_to_t0() {
        let x = random_tensor(&[2, 2, 5, 5], -1.0, 1.0, 3);
        for sharing in [Sharing::Shared, Sharing::PerStep] {
            let (store0, p0) = build(2, 3, 0, sharing, 4);
            let base = run(&store0, &p0, &x, Mode::Eval);
            for t in 1..=3 {
                let (mut store, p) = build(2, 3, t, sharing, 4);
                for &id in &p.recurrent {
                    store.get_mut(id).value.data_mut().fill(0.0);
                }
                assert_eq!(run(&store, &p, &x, Mode::Eval), base, "t={t} {sharing:?}");
            }
        }
    }

    fn conv3(x: &[f64], k: &[f64], b: f64) -> Vec<f64> {
        let mut out = vec![0.0; 16];
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut acc = b;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += x[(iy * 4 + ix) as usize] * k[(ky * 3 + kx) as usize];
                        }
                    }
                }
                out[(oy * 4 + ox) as usize] = acc;
            }
        }
        out
    }

    fn bn_relu(h: &[f64], gamma: f64, beta: f64) -> Vec<f64> {
        let m = h.iter().sum::<f64>() / h.len() as f64;
        let v = h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / h.len() as f64;
        h.iter()
            .map(|x| (gamma * (x - m) / (v + BN_EPS).sqrt() + beta).max(0.0))
            .collect()
    }

    #[test]
    fn t2_matches_hand_unrolled_steps() {
        let x = random_tensor(&[1, 1, 4, 4], -1.0, 1.0, 5);
        for sharing in [Sharing::Shared, Sharing::PerStep] {
            let (mut store, p) = build(1, 1, 2, sharing, 6);
            let b = p.forward_conv.bias.unwrap();
            store.get_mut(b).value.data_mut()[0] = 0.3;
            for (i, a) in p.bn_affine.iter().enumerate() {
                store.get_mut(a.gamma).value.data_mut()[0] = 1.0 + 0.25 * i as f64;
                store.get_mut(a.beta).value.data_mut()[0] = 0.1 * (i as f64 + 1.0);
            }
            let val = |id: ParamId| store.get(id).value.data().to_vec();
            let wf = val(p.forward_conv.weight);
            let affine = |step: usize| {
                let a = match sharing {
                    Sharing::Shared => p.bn_affine[0],
                    Sharing::PerStep => p.bn_affine[step],
                };
                (val(a.gamma)[0], val(a.beta)[0])
            };
            let wr = |step: usize| match sharing {
                Sharing::Shared => val(p.recurrent[0]),
                Sharing::PerStep => val(p.recurrent[step - 1]),
            };
            let feed = conv3(x.data(), &wf, 0.3);
            let (g0, b0) = affine(0);
            let mut a = bn_relu(&feed, g0, b0);
            for step in 1..=2 {
                let rec = conv3(&a, &wr(step), 0.0);
                let h: Vec<f64> = feed.iter().zip(&rec).map(|(f, r)| f + r).collect();
                let (g, bb) = affine(step);
                a = bn_relu(&h, g, bb);
            }
            let got = run(&store, &p, &x, Mode::Train);
            for (g, w) in got.data().iter().zip(&a) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn parameter_counts_follow_sharing() {
        let count = |t, sharing| build(4, 4, t, sharing, 0).0.learnable_count();
        assert_eq!(count(2, Sharing::Shared), count(3, Sharing::Shared));
        assert!(count(3, Sharing::PerStep) > count(2, Sharing::PerStep));
        let rec = 4 * 4 * 9;
        let affine = 2 * 4;
        assert_eq!(count(3, Sharing::PerStep) - count(2, Sharing::PerStep), rec + affine);
    }
}
