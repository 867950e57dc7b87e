use crate::autodiff::{Backward, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Logistic function in the branch form that never exponentiates a
/// positive argument.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    // Saves nothing: the output's sign pattern is the derivative mask.
    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let data = grad
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor::new(
            grad.shape().clone(),
            data,
            grad.precision(),
        )?)])
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    let out = tape.value(x).map("relu", |v| v.max(0.0))?;
    Ok(tape.record(out, &[x], ReluOp))
}

struct SigmoidOp;

impl Backward for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    // σ' = σ(1 − σ), read from the saved output.
    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let data = grad
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &s)| g * s * (1.0 - s))
            .collect();
        Ok(vec![Some(Tensor::new(
            grad.shape().clone(),
            data,
            grad.precision(),
        )?)])
    }
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Result<Var> {
    let out = tape.value(x).map("sigmoid", sigmoid_scalar)?;
    Ok(tape.record(out, &[x], SigmoidOp))
}
