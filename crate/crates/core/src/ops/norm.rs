//! Layer and batch normalization over `(N, V, H, W, C)` feature maps.
//!
//! Layer normalization takes statistics per (sample, channel) over the V·H·W
//! voxels of that slice; batch normalization takes them per channel over
//! N·V·H·W. Both use the biased variance (divide by the element count) and
//! apply a per-channel affine `γ ⊙ x̂ + β`.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Affine parameters of a normalization layer as nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Grouping {
    /// One statistic per (sample, channel).
    SampleChannel,
    /// One statistic per channel across the batch.
    Channel,
}

struct Layout {
    n: usize,
    voxels: usize,
    c: usize,
}

impl Layout {
    fn of(x: &Tensor) -> Result<Self> {
        let [n, v, h, w, c] = x.shape().as_nvhwc()?;
        Ok(Layout {
            n,
            voxels: v * h * w,
            c,
        })
    }

    fn groups(&self, grouping: Grouping) -> usize {
        match grouping {
            Grouping::SampleChannel => self.n * self.c,
            Grouping::Channel => self.c,
        }
    }

    fn group_size(&self, grouping: Grouping) -> usize {
        match grouping {
            Grouping::SampleChannel => self.voxels,
            Grouping::Channel => self.n * self.voxels,
        }
    }

    /// Group of every element, in flat order.
    fn group_of(&self, grouping: Grouping) -> impl Iterator<Item = usize> + '_ {
        let per_sample = self.voxels * self.c;
        (0..self.n * per_sample).map(move |i| {
            let c = i % self.c;
            match grouping {
                Grouping::SampleChannel => (i / per_sample) * self.c + c,
                Grouping::Channel => c,
            }
        })
    }
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    let c = *x.dims().last().unwrap_or(&0);
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.dims() != [c] {
            return Err(Error::ShapeMismatch {
                op: if name == "gamma" { "norm gamma" } else { "norm beta" },
                lhs: Shape::new(vec![c.max(1)])?,
                rhs: t.shape().clone(),
            });
        }
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("normalization epsilon must be > 0, got {eps}")));
    }
    Ok(())
}

/// Mean and biased variance per group, accumulated in flat element order.
fn group_stats(x: &Tensor, layout: &Layout, grouping: Grouping) -> (Vec<f64>, Vec<f64>) {
    let groups = layout.groups(grouping);
    let count = layout.group_size(grouping) as f64;
    let mut mean = vec![0.0; groups];
    let mut lo = vec![f64::INFINITY; groups];
    let mut hi = vec![f64::NEG_INFINITY; groups];
    for (&v, g) in x.data().iter().zip(layout.group_of(grouping)) {
        mean[g] += v;
        lo[g] = lo[g].min(v);
        hi[g] = hi[g].max(v);
    }
    for ((m, &l), &h) in mean.iter_mut().zip(&lo).zip(&hi) {
        // a constant group has its value as the exact mean
        *m = if l == h { l } else { *m / count };
    }
    let mut var = vec![0.0; groups];
    for (&v, g) in x.data().iter().zip(layout.group_of(grouping)) {
        let d = v - mean[g];
        var[g] += d * d;
    }
    for s in &mut var {
        *s /= count;
    }
    (mean, var)
}

struct NormOp {
    grouping: Grouping,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// False when the statistics are constants (batch norm at inference).
    stats_depend_on_input: bool,
}

impl NormOp {
    fn normalized(&self, x: &Tensor, layout: &Layout) -> Vec<f64> {
        x.data()
            .iter()
            .zip(layout.group_of(self.grouping))
            .map(|(&v, g)| (v - self.mean[g]) * self.inv_std[g])
            .collect()
    }
}

impl Backward for NormOp {
    fn name(&self) -> &'static str {
        match (self.grouping, self.stats_depend_on_input) {
            (Grouping::SampleChannel, _) => "layer_norm",
            (Grouping::Channel, true) => "batch_norm_train",
            (Grouping::Channel, false) => "batch_norm_eval",
        }
    }

    // Saves per-group mean and 1/sqrt(var + ε); x̂ is recomputed from the input.
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let layout = Layout::of(x)?;
        let c = layout.c;
        let xhat = self.normalized(x, &layout);
        let g = grad.data();
        let p = grad.precision();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (&gi, &xh)) in g.iter().zip(&xhat).enumerate() {
            dgamma[i % c] += gi * xh;
            dbeta[i % c] += gi;
        }

        let dx = if needs[0] {
            let gd = gamma.data();
            let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * gd[i % c]).collect();
            let data = if self.stats_depend_on_input {
                let groups = layout.groups(self.grouping);
                let m = layout.group_size(self.grouping) as f64;
                let mut sum1 = vec![0.0; groups];
                let mut sum2 = vec![0.0; groups];
                for ((&d, &xh), grp) in dxhat.iter().zip(&xhat).zip(layout.group_of(self.grouping)) {
                    sum1[grp] += d;
                    sum2[grp] += d * xh;
                }
                dxhat
                    .iter()
                    .zip(&xhat)
                    .zip(layout.group_of(self.grouping))
                    .map(|((&d, &xh), grp)| {
                        self.inv_std[grp] / m * (m * d - sum1[grp] - xh * sum2[grp])
                    })
                    .collect()
            } else {
                dxhat
                    .iter()
                    .zip(layout.group_of(self.grouping))
                    .map(|(&d, grp)| d * self.inv_std[grp])
                    .collect()
            };
            Some(Tensor::from_op("norm_backward", x.shape().clone(), data, p)?)
        } else {
            None
        };
        let shape_c = Shape::new(vec![c])?;
        Ok(vec![
            dx,
            needs[1]
                .then(|| Tensor::from_op("norm_backward", shape_c.clone(), dgamma, p))
                .transpose()?,
            needs[2]
                .then(|| Tensor::from_op("norm_backward", shape_c, dbeta, p))
                .transpose()?,
        ])
    }
}

fn apply(
    tape: &mut Tape,
    x: Var,
    p: &NormParams,
    op: NormOp,
    layout: &Layout,
) -> Result<Var> {
    let xv = tape.value(x);
    let gamma = tape.value(p.gamma).data();
    let beta = tape.value(p.beta).data();
    let c = layout.c;
    let data: Vec<f64> = op
        .normalized(xv, layout)
        .into_iter()
        .enumerate()
        .map(|(i, xh)| gamma[i % c] * xh + beta[i % c])
        .collect();
    let precision = xv
        .precision()
        .join(tape.value(p.gamma).precision())
        .join(tape.value(p.beta).precision());
    let out = Tensor::from_op(op.name(), xv.shape().clone(), data, precision)?;
    Ok(tape.record(out, &[x, p.gamma, p.beta], op))
}

/// Per-(sample, channel) normalization over V·H·W.
pub fn layer_norm(tape: &mut Tape, x: Var, p: &NormParams) -> Result<Var> {
    let xv = tape.value(x);
    check_affine(xv, tape.value(p.gamma), tape.value(p.beta), p.eps)?;
    let layout = Layout::of(xv)?;
    let (mean, var) = group_stats(xv, &layout, Grouping::SampleChannel);
    let inv_std = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let op = NormOp {
        grouping: Grouping::SampleChannel,
        mean,
        inv_std,
        stats_depend_on_input: true,
    };
    apply(tape, x, p, op, &layout)
}

/// Running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Batch normalization. In training mode the batch statistics normalize the
/// input and the returned [`RunningStats`] are the momentum update
/// `momentum · old + (1 − momentum) · batch`; in inference mode the running
/// statistics normalize and `None` is returned.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    p: &NormParams,
    running: &RunningStats,
    momentum: f64,
    training: bool,
) -> Result<(Var, Option<RunningStats>)> {
    let xv = tape.value(x);
    check_affine(xv, tape.value(p.gamma), tape.value(p.beta), p.eps)?;
    let layout = Layout::of(xv)?;
    let c = layout.c;
    if running.mean.dims() != [c] || running.var.dims() != [c] {
        return Err(Error::invalid(format!(
            "running statistics must have {c} entries"
        )));
    }
    if training {
        if layout.n < 2 {
            return Err(Error::invalid(
                "batch normalization in training mode needs a batch of at least 2",
            ));
        }
        let (mean, var) = group_stats(xv, &layout, Grouping::Channel);
        let blend = |old: &Tensor, new: &[f64]| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(&o, &n)| momentum * o + (1.0 - momentum) * n)
                .collect();
            Tensor::from_op("batch_norm_running", old.shape().clone(), data, old.precision())
        };
        let updated = RunningStats {
            mean: blend(&running.mean, &mean)?,
            var: blend(&running.var, &var)?,
        };
        let inv_std = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let op = NormOp {
            grouping: Grouping::Channel,
            mean,
            inv_std,
            stats_depend_on_input: true,
        };
        Ok((apply(tape, x, p, op, &layout)?, Some(updated)))
    } else {
        let op = NormOp {
            grouping: Grouping::Channel,
            mean: running.mean.data().to_vec(),
            inv_std: running
                .var
                .data()
                .iter()
                .map(|v| 1.0 / (v + p.eps).sqrt())
                .collect(),
            stats_depend_on_input: false,
        };
        Ok((apply(tape, x, p, op, &layout)?, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, finite_diff_check_params, Coords, ParamStore};
    use crate::ops::basic::weighted_sum;
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: Precision = Precision::F64;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, P, |_| rng.random_range(-2.0..3.0)).unwrap()
    }

    fn affine(tape: &mut Tape, c: usize, eps: f64) -> NormParams {
        NormParams {
            gamma: tape.constant(Tensor::ones(&[c], P).unwrap()),
            beta: tape.constant(Tensor::zeros(&[c], P).unwrap()),
            eps,
        }
    }

    fn slice_stats(y: &Tensor, n: usize, c: usize) -> (f64, f64) {
        let [_, v, h, w, cc] = y.shape().as_nvhwc().unwrap();
        let vals: Vec<f64> = (0..v * h * w).map(|vox| y.data()[(n * v * h * w + vox) * cc + c]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, var)
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 2, 2, 2, 2], 3.5, P).unwrap());
        let p = affine(&mut tape, 2, 1e-5);
        let y = layer_norm(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y).max_abs(), 0.0);
    }

    #[test]
    fn layer_norm_unit_variance_fixed_point() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 2, 2, 2, 1], P, |i| if i % 2 == 0 { 1.0 } else { -1.0 }).unwrap());
        let eps = 1e-12;
        let p = affine(&mut tape, 1, eps);
        let y = layer_norm(&mut tape, x, &p).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((o - i / (1.0 + eps).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let x = random(&[2, 3, 4, 5, 3], 7);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let p = affine(&mut tape, 3, 1e-5);
        let y = layer_norm(&mut tape, xv, &p).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let (m, v) = slice_stats(tape.value(y), n, c);
                assert!(m.abs() < 1e-6);
                assert!((v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn layer_norm_affine_invariance() {
        let x = random(&[1, 3, 3, 3, 2], 8);
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.input(t.clone());
            let p = affine(&mut tape, 2, 1e-5);
            let y = layer_norm(&mut tape, xv, &p).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        // per-channel a > 0 and b
        let moved = Tensor::from_fn(x.dims(), P, |i| {
            let (a, b) = if i % 2 == 0 { (3.0, -7.0) } else { (2.0, 40.0) };
            a * x.data()[i] + b
        })
        .unwrap();
        for (u, v) in run(&moved).data().iter().zip(base.data()) {
            assert!((u - v).abs() <= 1e-5 * v.abs().max(1.0));
        }
    }

    #[test]
    fn layer_norm_is_batch_composition_invariant() {
        let a = random(&[1, 2, 3, 2, 2], 1);
        let b = random(&[1, 2, 3, 2, 2], 2);
        let both = Tensor::from_vec(&[2, 2, 3, 2, 2], [a.data(), b.data()].concat(), P).unwrap();
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.input(t.clone());
            let p = affine(&mut tape, 2, 1e-5);
            let y = layer_norm(&mut tape, xv, &p).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(&both), [run(&a), run(&b)].concat());
    }

    #[test]
    fn batch_norm_behaviour() {
        let running = RunningStats {
            mean: Tensor::zeros(&[2], P).unwrap(),
            var: Tensor::ones(&[2], P).unwrap(),
        };
        let a = random(&[1, 2, 2, 2, 2], 3);
        let twice = Tensor::from_vec(&[2, 2, 2, 2, 2], [a.data(), a.data()].concat(), P).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(twice.clone());
        let p = affine(&mut tape, 2, 1e-5);
        let (y, upd) = batch_norm(&mut tape, x, &p, &running, 0.99, true).unwrap();
        let upd = upd.unwrap();
        assert!(upd.mean.data().iter().all(|m| m.abs() < 1.0));
        let yv = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = yv.data().iter().skip(c).step_by(2).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
        }

        // two identical, spatially constant samples normalize to zero
        let constant = Tensor::full(&[2, 2, 2, 2, 2], 1.7, P).unwrap();
        let x = tape.input(constant);
        let (y, _) = batch_norm(&mut tape, x, &p, &running, 0.99, true).unwrap();
        assert_eq!(tape.value(y).max_abs(), 0.0);

        // inference with (0, 1) running stats is identity up to ε
        let x = tape.input(twice.clone());
        let (y, none) = batch_norm(&mut tape, x, &p, &running, 0.99, false).unwrap();
        assert!(none.is_none());
        for (o, i) in tape.value(y).data().iter().zip(twice.data()) {
            assert!((o - i / (1.0 + 1e-5f64).sqrt()).abs() < 1e-12);
        }

        // batch of one rejected in training
        let x = tape.input(a);
        assert!(batch_norm(&mut tape, x, &p, &running, 0.99, true).is_err());
    }

    #[test]
    fn batch_norm_running_update() {
        let running = RunningStats {
            mean: Tensor::zeros(&[1], P).unwrap(),
            var: Tensor::ones(&[1], P).unwrap(),
        };
        let x = Tensor::from_vec(&[2, 1, 1, 2, 1], vec![1., 3., 5., 7.], P).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let p = affine(&mut tape, 1, 1e-5);
        let (_, upd) = batch_norm(&mut tape, xv, &p, &running, 0.99, true).unwrap();
        let upd = upd.unwrap();
        // batch mean 4, biased var 5
        assert!((upd.mean.data()[0] - 0.04).abs() < 1e-15);
        assert!((upd.var.data()[0] - (0.99 + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn norm_gradients() {
        for seed in 0..3 {
            let x = random(&[2, 2, 2, 3, 2], 40 + seed);
            let w = random(&[2, 2, 2, 3, 2], 50 + seed);
            let mut store = ParamStore::new();
            let g = store.add("gamma", random(&[2], 60 + seed));
            let b = store.add("beta", random(&[2], 70 + seed));
            let running = RunningStats {
                mean: random(&[2], 80 + seed),
                var: Tensor::from_vec(&[2], vec![0.7, 1.9], P).unwrap(),
            };
            for kind in ["ln", "bn_train", "bn_eval"] {
                let f = |t: &mut Tape, s: &ParamStore, xv: Var| -> Result<Var> {
                    let p = NormParams { gamma: t.param(s, g), beta: t.param(s, b), eps: 1e-5 };
                    let y = match kind {
                        "ln" => layer_norm(t, xv, &p)?,
                        "bn_train" => batch_norm(t, xv, &p, &running, 0.99, true)?.0,
                        _ => batch_norm(t, xv, &p, &running, 0.99, false)?.0,
                    };
                    weighted_sum(t, y, &w)
                };
                let r = finite_diff_check(|t, xv| f(t, &store, xv), &x, 1e-4).unwrap();
                assert!(r.passed, "{kind} input: {r}");
                let r = finite_diff_check_params(
                    |t, s| {
                        let xv = t.constant(x.clone());
                        f(t, s, xv)
                    },
                    &store,
                    1e-4,
                    Coords::All,
                    kind,
                )
                .unwrap();
                assert!(r.passed, "{kind} params: {r}");
            }
        }
    }
}
