use crate::error::Result;
use crate::graph::Var;
use crate::nn::layers::Conv2d;
use crate::nn::params::{ParamBuilder, Session};
use crate::nn::rcl::{RclParams, Sharing};
use crate::tensor::Scalar;

/// Recurrent residual unit: `y = e + RCL₂(RCL₁(e))` with `e` a 1×1
/// channel-matching projection of the input.
#[derive(Clone, Debug)]
pub struct RruParams {
    pub entry: Conv2d,
    pub rcl1: RclParams,
    pub rcl2: RclParams,
    pub width: usize,
}

impl RruParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        width: usize,
        t: usize,
        sharing: Sharing,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(RruParams {
                entry: Conv2d::build(b, "entry", cin, width, 1, true)?,
                rcl1: RclParams::build(b, "rcl1", width, width, t, sharing)?,
                rcl2: RclParams::build(b, "rcl2", width, width, t, sharing)?,
                width,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let e = self.entry.forward(s, x)?;
        let f = self.rcl1.forward(s, e)?;
        let f = self.rcl2.forward(s, f)?;
        s.graph.add(e, f)
    }
}
