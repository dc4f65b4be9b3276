//! Task losses, recorded on the graph so they can be differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1e-6;

/// Selectable training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SoftDice,
    Mse,
}

impl LossKind {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, pred: Var, target: &Target<'_, T>) -> Result<Var> {
        match (self, target) {
            (LossKind::CrossEntropy, Target::Classes(labels)) => cross_entropy(g, pred, labels),
            (LossKind::SoftDice, Target::Dense(t)) => {
                let t = g.constant((*t).clone());
                soft_dice_loss(g, pred, t)
            }
            (LossKind::Mse, Target::Dense(t)) => {
                let t = g.constant((*t).clone());
                mse(g, pred, t)
            }
            (k, _) => Err(Error::InvalidArgument(format!("loss {k:?} does not fit this target kind"))),
        }
    }
}

/// Supervision for one batch.
pub enum Target<'a, T> {
    Classes(&'a [usize]),
    Dense(&'a Tensor<T>),
}

/// Mean over the batch of `−ln max(p_true, 1e-12)` for `N×C` probabilities.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("probabilities {shape:?} do not match {} labels", labels.len()),
        ));
    }
    let c = shape[1];
    let mut onehot = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {c} classes")));
        }
        onehot[i * c + l] = 1.0;
    }
    let onehot = g.constant(Tensor::from_f64(shape, &onehot)?);
    let p = g.clamp_min(probs, PROB_FLOOR);
    let lp = g.log(p);
    let picked = g.mul(lp, onehot)?;
    let total = g.sum(picked);
    Ok(g.mul_scalar(total, -1.0 / labels.len() as f64))
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` with `ε = 1e-6`.
pub fn soft_dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, gt: Var) -> Result<Var> {
    let inter = g.mul(probs, gt)?;
    let inter = g.sum(inter);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let sp = g.sum(probs);
    let sg = g.sum(gt);
    let den = g.add(sp, sg)?;
    let den = g.add_scalar(den, DICE_SMOOTH);
    let ratio = g.div(num, den)?;
    let neg = g.mul_scalar(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean of squared element differences.
pub fn mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Mean squared error on plain buffers (f64 accumulation).
pub fn mse_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let s: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Hard Dice `2|GT∩SR| / (|GT| + |SR|)`; two empty masks score 1.
pub fn dice_coefficient(sr: &[bool], gt: &[bool]) -> Result<f64> {
    if sr.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "dice masks differ in size: {} vs {}",
            sr.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&s, &g) in sr.iter().zip(gt) {
        inter += (s && g) as usize;
        a += s as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Thresholds probabilities at `threshold` (inclusive).
pub fn binarize<T: Scalar>(p: &[T], threshold: f64) -> Vec<bool> {
    p.iter().map(|v| v.as_f64() >= threshold).collect()
}
