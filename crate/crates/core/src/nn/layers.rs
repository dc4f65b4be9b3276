use crate::error::Result;
use crate::graph::Var;
use crate::nn::params::{BnAffine, BnStats, ParamBuilder, ParamId, Session};
use crate::tensor::Scalar;

/// Stride-1 convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub pad: usize,
}

impl Conv2d {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = b.kernel(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?;
        let bias = if with_bias {
            Some(b.bias(&format!("{name}.bias"), cout)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, pad: k / 2 })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.pad)
    }
}

/// 2×2 stride-2 transposed convolution (decoder up-conv).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(UpConv {
            weight: b.kernel(&format!("{name}.weight"), &[cin, cout, 2, 2], cin * 4)?,
            bias: b.bias(&format!("{name}.bias"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d_transpose(x, w, Some(b), 2)
    }
}

/// Batch norm with its own affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub affine: BnAffine,
    pub stats: BnStats,
}

impl BatchNorm {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            affine: b.bn_affine(name, channels)?,
            stats: b.bn_stats(name, channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self.affine, self.stats)
    }

    /// BN followed by ReLU.
    pub fn forward_relu<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        Ok(s.graph.relu(y))
    }
}

/// Fully connected layer on `N×F` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(Dense {
            weight: b.kernel(&format!("{name}.weight"), &[fin, fout], fin)?,
            bias: b.bias(&format!("{name}.bias"), fout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add_channel_bias(y, b)
    }
}
