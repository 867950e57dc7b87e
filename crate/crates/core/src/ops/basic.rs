use crate::autodiff::{Backward, Tape, Var};
use crate::error::Result;
use crate::tensor::{reduction_map, ReduceMode, Shape, Tensor};

struct AddOp;

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = tape.value(a).add(tape.value(b))?;
    Ok(tape.record(out, &[a, b], AddOp))
}

struct MulOp;

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = if needs[0] { Some(grad.mul(b)?) } else { None };
        let gb = if needs[1] {
            Some(grad.mul(a)?.sum_to(b.shape())?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

/// Element-wise product; `b` may broadcast along singleton axes of `a`.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = tape.value(a).mul(tape.value(b))?;
    Ok(tape.record(out, &[a, b], MulOp))
}

struct ScaleOp(f64);

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.scale(self.0)?)])
    }
}

pub fn scale(tape: &mut Tape, x: Var, factor: f64) -> Result<Var> {
    let out = tape.value(x).scale(factor)?;
    Ok(tape.record(out, &[x], ScaleOp(factor)))
}

struct ConcatOp {
    split: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let c = *output.dims().last().expect("concat output has a channel axis");
        let ga = if needs[0] {
            Some(grad.slice_channels(0, self.split)?)
        } else {
            None
        };
        let gb = if needs[1] {
            Some(grad.slice_channels(self.split, c)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

/// Channel concatenation; `a` occupies the leading channels.
pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = tape.value(a).concat_channels(tape.value(b))?;
    let split = *tape.value(a).dims().last().expect("concat checked rank");
    Ok(tape.record(out, &[a, b], ConcatOp { split }))
}

struct ReduceOp {
    map: Vec<usize>,
    mode: ReduceMode,
    count: usize,
    /// For max: input flat index of the first maximum of each output slot.
    argmax: Vec<usize>,
}

impl Backward for ReduceOp {
    fn name(&self) -> &'static str {
        match self.mode {
            ReduceMode::Sum => "reduce_sum",
            ReduceMode::Mean => "reduce_mean",
            ReduceMode::Max => "reduce_max",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let g = grad.data();
        let data = match self.mode {
            ReduceMode::Sum => self.map.iter().map(|&j| g[j]).collect(),
            ReduceMode::Mean => {
                let n = self.count as f64;
                self.map.iter().map(|&j| g[j] / n).collect()
            }
            ReduceMode::Max => {
                let mut d = vec![0.0; x.len()];
                for (j, &i) in self.argmax.iter().enumerate() {
                    d[i] += g[j];
                }
                d
            }
        };
        Ok(vec![Some(Tensor::new(
            x.shape().clone(),
            data,
            grad.precision(),
        )?)])
    }
}

/// Reduction over `axes`, which become singleton extents. Max routes its
/// gradient to the first maximal element in row-major order.
pub fn reduce(tape: &mut Tape, x: Var, axes: &[usize], mode: ReduceMode) -> Result<Var> {
    let xv = tape.value(x);
    let out = xv.reduce(axes, mode)?;
    let (_, map) = reduction_map(xv.shape(), axes)?;
    let argmax = if mode == ReduceMode::Max {
        let mut best = vec![usize::MAX; out.len()];
        for (i, (&v, &j)) in xv.data().iter().zip(&map).enumerate() {
            if best[j] == usize::MAX || v > xv.data()[best[j]] {
                best[j] = i;
            }
        }
        best
    } else {
        Vec::new()
    };
    let count = xv.len() / out.len();
    Ok(tape.record(
        out,
        &[x],
        ReduceOp {
            map,
            mode,
            count,
            argmax,
        },
    ))
}

struct SumAllOp;

impl Backward for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(
            inputs[0].dims(),
            grad.data()[0],
            grad.precision(),
        )?)])
    }
}

/// Sum of all elements as a rank-0 scalar.
pub fn sum_all(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let out = Tensor::from_op("sum_all", Shape::scalar(), vec![xv.sum_all()], xv.precision())?;
    Ok(tape.record(out, &[x], SumAllOp))
}

/// Σ x ⊙ weights for a constant weight tensor; used to turn a feature map
/// into a scalar with non-degenerate gradients in checks.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = mul(tape, x, w)?;
    sum_all(tape, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::tensor::Precision;

    const P: Precision = Precision::F64;

    #[test]
    fn quadratic_rule() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::from_vec(&[3], vec![1., 2., 3.], P).unwrap());
        let sq = mul(&mut tape, p, p).unwrap();
        let loss = sum_all(&mut tape, sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn linearity_of_backward() {
        let x0 = Tensor::from_fn(&[2, 3], P, |i| (i as f64 * 0.7).sin()).unwrap();
        let wa = Tensor::from_fn(&[2, 3], P, |i| i as f64 * 0.3 - 0.4).unwrap();
        let wb = Tensor::from_fn(&[2, 3], P, |i| 1.0 / (i as f64 + 1.0)).unwrap();
        let grad_of = |use_a: bool, use_b: bool| {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let sq = mul(&mut tape, x, x).unwrap();
            let la = weighted_sum(&mut tape, sq, &wa).unwrap();
            let lb = weighted_sum(&mut tape, x, &wb).unwrap();
            let loss = match (use_a, use_b) {
                (true, true) => add(&mut tape, la, lb).unwrap(),
                (true, false) => la,
                _ => lb,
            };
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let both = grad_of(true, true);
        let sum = grad_of(true, false).add(&grad_of(false, true)).unwrap();
        for (a, b) in both.data().iter().zip(sum.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn ops_pass_gradient_checks() {
        let x = Tensor::from_fn(&[1, 2, 2, 2, 3], P, |i| ((i * 37) % 11) as f64 * 0.3 - 1.4).unwrap();
        let w = Tensor::from_fn(&[1, 2, 2, 2, 3], P, |i| ((i * 13) % 7) as f64 * 0.2 - 0.5).unwrap();
        let m = Tensor::from_fn(&[1, 1, 1, 1, 3], P, |i| i as f64 + 0.5).unwrap();
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("mul_broadcast", Box::new(|t: &mut Tape, x| {
                let c = t.constant(m.clone());
                let y = mul(t, x, c)?;
                weighted_sum(t, y, &w)
            })),
            ("mul_broadcast_rhs", Box::new(|t: &mut Tape, x| {
                let r = reduce(t, x, &[1, 2, 3], ReduceMode::Mean)?;
                let c = t.constant(w.clone());
                let y = mul(t, c, r)?;
                weighted_sum(t, y, &w)
            })),
            ("concat", Box::new(|t: &mut Tape, x| {
                let y = concat_channels(t, x, x)?;
                let ww = w.concat_channels(&w.scale(-2.0)?)?;
                weighted_sum(t, y, &ww)
            })),
            ("reduce_max_channel", Box::new(|t: &mut Tape, x| {
                let y = reduce(t, x, &[4], ReduceMode::Max)?;
                let s = scale(t, y, 1.5)?;
                sum_all(t, s)
            })),
            ("reduce_sum_spatial", Box::new(|t: &mut Tape, x| {
                let y = reduce(t, x, &[1, 2, 3], ReduceMode::Sum)?;
                let sq = mul(t, y, y)?;
                sum_all(t, sq)
            })),
        ];
        for (name, f) in checks {
            let r = finite_diff_check(f, &x, 1e-4).unwrap();
            assert!(r.passed, "{name}: {r}");
        }
    }
}
