use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceLossConfig {
    /// Added to numerator and denominator.
    pub smooth: f64,
    /// Average per-sample losses instead of pooling sums over the batch.
    pub per_sample: bool,
}

impl Default for DiceLossConfig {
    fn default() -> Self {
        DiceLossConfig {
            smooth: 1.0,
            per_sample: false,
        }
    }
}

impl DiceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) || !self.smooth.is_finite() {
            return Err(Error::config("dice.smooth", format!("must be > 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

/// Sums `(Σp·g, Σp + Σg)` for one group of voxels.
fn sums(p: &[f64], g: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        inter += pi * gi;
        total += pi + gi;
    }
    (inter, total)
}

struct DiceOp {
    gt: Tensor,
    smooth: f64,
    groups: usize,
}

impl Backward for DiceOp {
    fn name(&self) -> &'static str {
        "soft_dice_loss"
    }

    // For one group, L = 1 − (2I + s)/(S + s), so
    // ∂L/∂p_i = ((2I + s) − 2 g_i (S + s)) / (S + s)².
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let upstream = grad.data()[0] / self.groups as f64;
        let size = p.len() / self.groups;
        let mut dp = Vec::with_capacity(p.len());
        for (pg, gg) in p.data().chunks(size).zip(self.gt.data().chunks(size)) {
            let (inter, total) = sums(pg, gg);
            let num = 2.0 * inter + self.smooth;
            let den = total + self.smooth;
            dp.extend(gg.iter().map(|&g| upstream * (num - 2.0 * g * den) / (den * den)));
        }
        Ok(vec![Some(Tensor::new(p.shape().clone(), dp, grad.precision())?)])
    }
}

/// `1 − (2Σp·g + s)/(Σp + Σg + s)`, with sums over the whole batch, or the
/// mean of that per sample when `cfg.per_sample` is set.
pub fn soft_dice_loss(tape: &mut Tape, pred: Var, gt: &Tensor, cfg: &DiceLossConfig) -> Result<Var> {
    cfg.validate()?;
    let p = tape.value(pred);
    if p.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_dice_loss",
            lhs: p.shape().clone(),
            rhs: gt.shape().clone(),
        });
    }
    if let Some(i) = gt.data().iter().position(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::invalid(format!(
            "ground truth must be binary, found {} at flat index {i}",
            gt.data()[i]
        )));
    }
    if let Some(i) = p.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid(format!(
            "predictions must be probabilities, found {} at flat index {i}",
            p.data()[i]
        )));
    }
    let groups = if cfg.per_sample && p.shape().rank() > 0 { p.dims()[0] } else { 1 };
    let size = p.len() / groups;
    let mut loss = 0.0;
    for (pg, gg) in p.data().chunks(size).zip(gt.data().chunks(size)) {
        let (inter, total) = sums(pg, gg);
        loss += 1.0 - (2.0 * inter + cfg.smooth) / (total + cfg.smooth);
    }
    loss /= groups as f64;
    let out = Tensor::new(Shape::scalar(), vec![loss], p.precision())?;
    Ok(tape.record(
        out,
        &[pred],
        DiceOp {
            gt: gt.clone(),
            smooth: cfg.smooth,
            groups,
        },
    ))
}
