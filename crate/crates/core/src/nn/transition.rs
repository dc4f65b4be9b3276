use crate::error::Result;
use crate::graph::Var;
use crate::nn::layers::{BatchNorm, Conv2d};
use crate::nn::params::{ParamBuilder, Session};
use crate::tensor::Scalar;

/// Between dense blocks: 1×1 conv → BN → 2×2 average pooling.
///
/// Odd spatial extents are padded to even by replicating the last row/column.
#[derive(Clone, Debug)]
pub struct TransitionParams {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl TransitionParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(TransitionParams {
                conv: Conv2d::build(b, "conv", cin, cout, 1, true)?,
                bn: BatchNorm::build(b, "bn", cout)?,
                in_channels: cin,
                out_channels: cout,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let x = if shape.len() == 4 && (shape[2] % 2 == 1 || shape[3] % 2 == 1) {
            log::info!("transition: padding odd input {}×{} by replication", shape[2], shape[3]);
            s.graph.pad_to_even(x)?
        } else {
            x
        };
        let h = self.conv.forward(s, x)?;
        let h = self.bn.forward(s, h)?;
        s.graph.avg_pool2(h)
    }
}
