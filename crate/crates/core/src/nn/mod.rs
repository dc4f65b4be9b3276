//! Composite layers built from the autograd primitives.

pub mod dense;
pub mod layers;
pub mod params;
pub mod rcl;
pub mod rru;
pub mod transition;

pub use dense::{DcrcBlockParams, DenseUnit, UnitKind};
pub use layers::{BatchNorm, Conv2d, Dense, UpConv};
pub use params::{
    BnAffine, BnStats, ParamBuilder, ParamEntry, ParamId, ParamKind, ParamStore, Session, StatUpdate,
};
pub use rcl::{RclParams, Sharing};
pub use rru::RruParams;
pub use transition::TransitionParams;
