use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Sharing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
    Detection,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
            Task::Detection => "detection",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Dense blocks of feedforward units.
    DenseNet,
    /// Dense blocks of recurrent units.
    Dcrn,
    /// Recurrent residual U-Net with a sigmoid output.
    R2UNet,
    /// Recurrent residual U-Net regressing a density surface (linear output).
    UdNet,
}

impl ModelKind {
    pub fn task(self) -> Task {
        match self {
            ModelKind::DenseNet | ModelKind::Dcrn => Task::Classification,
            ModelKind::R2UNet => Task::Segmentation,
            ModelKind::UdNet => Task::Detection,
        }
    }

    pub fn is_unet(self) -> bool {
        matches!(self, ModelKind::R2UNet | ModelKind::UdNet)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::DenseNet => "densenet",
            ModelKind::Dcrn => "dcrn",
            ModelKind::R2UNet => "r2unet",
            ModelKind::UdNet => "udnet",
        })
    }
}

/// Classifier head after the last dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Global average pooling → fully connected.
    #[default]
    Gap,
    /// Flatten → fully connected (depends on `input_size`).
    Dense,
}

/// Decoder upsampling operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// 2×2 transposed convolution, stride 2.
    #[default]
    Transpose,
    /// Nearest-neighbour 2× followed by a 1×1 convolution.
    NearestConv,
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub kind: ModelKind,
    /// Recurrent unfolding steps (ignored by `densenet`).
    pub t: usize,
    pub sharing: Sharing,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    /// Encoder/decoder widths, e.g. `[1, 16, 32, 64, 128, 64, 32, 16, 1]`.
    pub channel_plan: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub head: Head,
    pub stem_channels: usize,
    pub upsample: Upsample,
    /// Spatial input extent; only the dense head depends on it.
    pub input_size: usize,
}

pub const REFERENCE_PLAN: [usize; 9] = [1, 16, 32, 64, 128, 64, 32, 16, 1];

impl ModelSpec {
    /// The reference configuration for each architecture: 4 blocks of 3
    /// units with growth rate 5 for the classifiers, the 1→16→32→64→128 plan
    /// for the U-Nets, `t = 2` except UD-Net's `t = 3`.
    pub fn reference(kind: ModelKind) -> Self {
        let (t, sharing, in_channels) = match kind {
            ModelKind::DenseNet => (0, Sharing::Shared, 3),
            ModelKind::Dcrn => (2, Sharing::Shared, 3),
            ModelKind::R2UNet => (2, Sharing::PerStep, 1),
            ModelKind::UdNet => (3, Sharing::PerStep, 1),
        };
        ModelSpec {
            task: kind.task(),
            kind,
            t,
            sharing,
            blocks: 4,
            layers_per_block: 3,
            growth_rate: 5,
            channel_plan: if kind.is_unet() { REFERENCE_PLAN.to_vec() } else { Vec::new() },
            in_channels,
            num_classes: if kind.is_unet() { 1 } else { 4 },
            head: Head::Gap,
            stem_channels: 16,
            upsample: Upsample::Transpose,
            input_size: 32,
        }
    }

    /// Same spec with a different U-Net plan.
    pub fn with_plan(mut self, plan: &[usize]) -> Self {
        self.channel_plan = plan.to_vec();
        if let Some(&c) = plan.first() {
            self.in_channels = c;
        }
        self
    }

    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    pub fn with_sharing(mut self, sharing: Sharing) -> Self {
        self.sharing = sharing;
        self
    }

    /// Number of encoder levels of a U-Net plan.
    pub fn levels(&self) -> usize {
        self.channel_plan.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.task != self.kind.task() {
            return bad(format!("model {} cannot serve task {}", self.kind, self.task));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.kind.is_unet() {
            let p = &self.channel_plan;
            if p.len() < 3 || p.len() % 2 == 0 {
                return bad(format!("channel plan {p:?} must have odd length ≥ 3"));
            }
            if p.iter().any(|&w| w == 0) {
                return bad(format!("channel plan {p:?} contains a zero width"));
            }
            if p.iter().ne(p.iter().rev()) {
                return bad(format!("channel plan {p:?} is not palindromic around the bottleneck"));
            }
            if p[0] != self.in_channels {
                return bad(format!("plan input width {} != in_channels {}", p[0], self.in_channels));
            }
        } else {
            if self.blocks == 0 || self.layers_per_block == 0 || self.growth_rate == 0 {
                return bad("blocks, layers_per_block and growth_rate must be positive".into());
            }
            if self.num_classes < 2 {
                return bad("classification needs at least 2 classes".into());
            }
            if self.stem_channels == 0 || self.input_size == 0 {
                return bad("stem_channels and input_size must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_specs_validate() {
        for k in [ModelKind::DenseNet, ModelKind::Dcrn, ModelKind::R2UNet, ModelKind::UdNet] {
            ModelSpec::reference(k).validate().unwrap();
        }
    }

    #[test]
    fn malformed_plans_are_rejected() {
        let spec = ModelSpec::reference(ModelKind::R2UNet).with_plan(&[1, 16, 32, 64, 128, 64, 32, 8, 1]);
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let spec = ModelSpec::reference(ModelKind::R2UNet).with_plan(&[1, 16, 0, 16, 1]);
        assert!(spec.validate().is_err());
        let spec = ModelSpec::reference(ModelKind::R2UNet).with_plan(&[1, 16, 16, 1]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn task_kind_mismatch_is_rejected() {
        let mut s = ModelSpec::reference(ModelKind::Dcrn);
        s.task = Task::Detection;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_serializes_with_lowercase_names() {
        let s = serde_json::to_string(&ModelSpec::reference(ModelKind::UdNet)).unwrap();
        assert!(s.contains("\"kind\":\"udnet\""));
        assert!(s.contains("\"sharing\":\"per_step\""));
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ModelSpec::reference(ModelKind::UdNet));
    }
}
