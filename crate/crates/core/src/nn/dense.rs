//! Densely connected blocks: each unit consumes the channel concatenation of
//! the block input and every earlier unit output, and appends `growth_rate`
//! channels.

use crate::error::Result;
use crate::graph::Var;
use crate::nn::layers::{BatchNorm, Conv2d};
use crate::nn::params::{ParamBuilder, Session};
use crate::nn::rcl::{RclParams, Sharing};
use crate::tensor::Scalar;

/// Composite function of one dense-block unit.
#[derive(Clone, Debug)]
pub enum DenseUnit {
    /// Pre-activation BN → ReLU → RCL.
    Recurrent { pre: BatchNorm, rcl: RclParams },
    /// Feedforward baseline: BN → ReLU → conv(+b) → BN → ReLU → conv.
    ///
    /// The second conv is bias-free so that the unit has exactly the learnable
    /// count of a shared-weight recurrent unit (forward kernel + bias,
    /// recurrent kernel, one BN affine pair).
    Feedforward {
        pre: BatchNorm,
        conv1: Conv2d,
        mid: BatchNorm,
        conv2: Conv2d,
    },
}

impl DenseUnit {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            DenseUnit::Recurrent { pre, rcl } => {
                let a = pre.forward_relu(s, x)?;
                rcl.forward(s, a)
            }
            DenseUnit::Feedforward { pre, conv1, mid, conv2 } => {
                let a = pre.forward_relu(s, x)?;
                let h = conv1.forward(s, a)?;
                let a = mid.forward_relu(s, h)?;
                conv2.forward(s, a)
            }
        }
    }
}

/// Which composite the dense units use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Recurrent { t: usize, sharing: Sharing },
    Feedforward,
}

#[derive(Clone, Debug)]
pub struct DcrcBlockParams {
    pub units: Vec<DenseUnit>,
    pub in_channels: usize,
    pub growth_rate: usize,
}

impl DcrcBlockParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        layers: usize,
        growth_rate: usize,
        kind: UnitKind,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let mut units = Vec::with_capacity(layers);
            for i in 0..layers {
                let cin = in_channels + i * growth_rate;
                let unit = b.scoped(format!("unit{i}"), |b| {
                    let pre = BatchNorm::build(b, "pre_bn", cin)?;
                    Ok(match kind {
                        UnitKind::Recurrent { t, sharing } => DenseUnit::Recurrent {
                            pre,
                            rcl: RclParams::build(b, "rcl", cin, growth_rate, t, sharing)?,
                        },
                        UnitKind::Feedforward => DenseUnit::Feedforward {
                            pre,
                            conv1: Conv2d::build(b, "conv1", cin, growth_rate, 3, true)?,
                            mid: BatchNorm::build(b, "mid_bn", growth_rate)?,
                            conv2: Conv2d::build(b, "conv2", growth_rate, growth_rate, 3, false)?,
                        },
                    })
                })?;
                units.push(unit);
            }
            Ok(DcrcBlockParams {
                units,
                in_channels,
                growth_rate,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.units.len() * self.growth_rate
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for unit in &self.units {
            let input = if features.len() == 1 {
                features[0]
            } else {
                s.graph.concat(&features)?
            };
            let y = unit.forward(s, input)?;
            features.push(y);
        }
        if features.len() == 1 {
            return Ok(x);
        }
        s.graph.concat(&features)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::graph::Mode;
    use crate::nn::params::{ParamId, ParamStore, BN_EPS};
    use crate::tensor::Tensor;

    fn build(cin: usize, layers: usize, growth: usize, kind: UnitKind) -> (ParamStore<f64>, DcrcBlockParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DcrcBlockParams::build(&mut ParamBuilder::new(&mut store, &mut rng), "blk", cin, layers, growth, kind).unwrap();
        (store, p)
    }

    fn out_shape(store: &ParamStore<f64>, p: &DcrcBlockParams, x: Tensor<f64>) -> Vec<usize> {
        let mut s = Session::new(store, Mode::Train);
        let xv = s.input(x);
        let y = p.forward(&mut s, xv).unwrap();
        s.graph.shape(y).to_vec()
    }

    #[test]
    fn eight_channels_three_layers_growth_five_gives_23() {
        let kind = UnitKind::Recurrent { t: 2, sharing: Sharing::Shared };
        let (store, p) = build(8, 3, 5, kind);
        assert_eq!(p.out_channels(), 23);
        assert_eq!(out_shape(&store, &p, Tensor::ones(vec![1, 8, 4, 4])), vec![1, 23, 4, 4]);
        let (store, p) = build(6, 1, 4, kind);
        assert_eq!(out_shape(&store, &p, Tensor::ones(vec![2, 6, 4, 4])), vec![2, 10, 4, 4]);
    }

    // Plain dense block on raw buffers: every unit is BN→ReLU→conv(+b)→BN→ReLU.
    fn reference_block(store: &ParamStore<f64>, x: &Tensor<f64>, layers: usize, growth: usize) -> Vec<f64> {
        let (n, c0, h, w) = x.dims4("x").unwrap();
        let get = |name: &str| {
            let id: ParamId = store.id_of(name).unwrap_or_else(|| panic!("{name}"));
            store.get(id).value.data().to_vec()
        };
        let hw = h * w;
        let mut feats: Vec<Vec<f64>> = (0..c0)
            .map(|c| (0..n).flat_map(|ni| x.sample(ni)[c * hw..(c + 1) * hw].to_vec()).collect())
            .collect();
        let bn_relu = |ch: &[f64], g: f64, b: f64| -> Vec<f64> {
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            let v = ch.iter().map(|z| (z - m).powi(2)).sum::<f64>() / ch.len() as f64;
            ch.iter().map(|z| (g * (z - m) / (v + BN_EPS).sqrt() + b).max(0.0)).collect()
        };
        for u in 0..layers {
            let cin = feats.len();
            let pre = format!("blk.unit{u}.pre_bn");
            let (pg, pb) = (get(&format!("{pre}.gamma")), get(&format!("{pre}.beta")));
            let act: Vec<Vec<f64>> = (0..cin).map(|c| bn_relu(&feats[c], pg[c], pb[c])).collect();
            let k = get(&format!("blk.unit{u}.rcl.wf.weight"));
            let bias = get(&format!("blk.unit{u}.rcl.wf.bias"));
            let (g, b) = (get(&format!("blk.unit{u}.rcl.bn0.gamma")), get(&format!("blk.unit{u}.rcl.bn0.beta")));
            for co in 0..growth {
                let mut out = vec![0.0; n * hw];
                for ni in 0..n {
                    for y in 0..h as i64 {
                        for xx in 0..w as i64 {
                            let mut acc = bias[co];
                            for (ci, a) in act.iter().enumerate() {
                                for ky in 0..3i64 {
                                    for kx in 0..3i64 {
                                        let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                        if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                            acc += a[ni * hw + (iy as usize) * w + ix as usize]
                                                * k[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize];
                                        }
                                    }
                                }
                            }
                            out[ni * hw + y as usize * w + xx as usize] = acc;
                        }
                    }
                }
                feats.push(bn_relu(&out, g[co], b[co]));
            }
        }
        let mut flat = Vec::new();
        for ni in 0..n {
            for f in &feats {
                flat.extend_from_slice(&f[ni * hw..(ni + 1) * hw]);
            }
        }
        flat
    }

    #[test]
    fn t0_block_matches_plain_dense_block() {
        let (mut store, p) = build(3, 3, 2, UnitKind::Recurrent { t: 0, sharing: Sharing::Shared });
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let e = store.get_mut(id);
            if matches!(e.kind, crate::nn::ParamKind::BnGamma | crate::nn::ParamKind::BnBeta | crate::nn::ParamKind::Bias) {
                for (j, v) in e.value.data_mut().iter_mut().enumerate() {
                    *v += 0.05 * ((i + j) % 5) as f64;
                }
            }
        }
        let x = random_tensor(&[2, 3, 5, 4], -1.0, 1.0, 10);
        let mut s = Session::new(&store, Mode::Train);
        let xv = s.input(x.clone());
        let y = p.forward(&mut s, xv).unwrap();
        let want = reference_block(&store, &x, 3, 2);
        let got = s.graph.value(y).data();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}
