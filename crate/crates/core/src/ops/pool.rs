use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::basic::reduce;
use crate::tensor::{axis, ReduceMode, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolScope {
    /// Collapse V, H, W to 1×1×1, keep C (per-channel descriptors).
    GlobalSpatial,
    /// Collapse C to 1, keep V, H, W (per-voxel descriptors).
    GlobalChannel,
    /// 2×2×2 window, stride 2; every spatial extent must be even.
    Window2,
}

pub fn pool3d(tape: &mut Tape, x: Var, mode: PoolMode, scope: PoolScope) -> Result<Var> {
    let reduce_mode = match mode {
        PoolMode::Max => ReduceMode::Max,
        PoolMode::Avg => ReduceMode::Mean,
    };
    tape.value(x).shape().as_nvhwc()?;
    match scope {
        PoolScope::GlobalSpatial => reduce(tape, x, &[axis::V, axis::H, axis::W], reduce_mode),
        PoolScope::GlobalChannel if mode == PoolMode::Avg => channel_mean(tape, x),
        PoolScope::GlobalChannel => reduce(tape, x, &[axis::C], reduce_mode),
        PoolScope::Window2 => window_pool(tape, x, mode),
    }
}

struct ChannelMeanOp;

impl Backward for ChannelMeanOp {
    fn name(&self) -> &'static str {
        "channel_mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let c = *x.dims().last().unwrap_or(&1);
        let data = (0..x.len()).map(|i| grad.data()[i / c] / c as f64).collect();
        Ok(vec![Some(Tensor::new(x.shape().clone(), data, grad.precision())?)])
    }
}

/// Mean over the channel axis. Each voxel's channels are summed in ascending
/// order of value, so the result does not depend on the channel order.
fn channel_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let c = xv.shape().as_nvhwc()?[axis::C];
    let mut scratch = vec![0.0; c];
    let data = xv
        .data()
        .chunks_exact(c)
        .map(|voxel| {
            scratch.copy_from_slice(voxel);
            scratch.sort_unstable_by(f64::total_cmp);
            scratch.iter().sum::<f64>() / c as f64
        })
        .collect();
    let out = Tensor::from_op("channel_mean", xv.shape().with_axis(axis::C, 1)?, data, xv.precision())?;
    Ok(tape.record(out, &[x], ChannelMeanOp))
}

struct WindowPoolOp {
    mode: PoolMode,
    /// Max mode: input flat index chosen for each output element.
    source: Vec<usize>,
}

impl Backward for WindowPoolOp {
    fn name(&self) -> &'static str {
        match self.mode {
            PoolMode::Max => "max_pool2",
            PoolMode::Avg => "avg_pool2",
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
        let mut dx = vec![0.0; x.len()];
        match self.mode {
            PoolMode::Max => {
                for (&src, &g) in self.source.iter().zip(grad.data()) {
                    dx[src] += g;
                }
            }
            PoolMode::Avg => {
                for_each_window(x.shape(), |o, members| {
                    let g = grad.data()[o] / 8.0;
                    for &m in members {
                        dx[m] += g;
                    }
                })?;
            }
        }
        Ok(vec![Some(Tensor::new(
            x.shape().clone(),
            dx,
            grad.precision(),
        )?)])
    }
}

fn halved(shape: &Shape) -> Result<Shape> {
    let [n, v, h, w, c] = shape.as_nvhwc()?;
    if v % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "2×2×2 pooling needs even spatial extents, got {shape}"
        )));
    }
    Shape::new(vec![n, v / 2, h / 2, w / 2, c])
}

/// Calls `f(output_index, [8 input indices])` for every 2×2×2 window, with
/// members in row-major order.
fn for_each_window(shape: &Shape, mut f: impl FnMut(usize, &[usize; 8])) -> Result<()> {
    let out = halved(shape)?;
    let [n, v, h, w, c] = shape.as_nvhwc()?;
    let [_, ov, oh, ow, _] = out.as_nvhwc()?;
    let idx = |nn: usize, z: usize, y: usize, x: usize, ch: usize| (((nn * v + z) * h + y) * w + x) * c + ch;
    let mut o = 0;
    let mut members = [0usize; 8];
    for nn in 0..n {
        for z in 0..ov {
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let mut k = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    members[k] = idx(nn, 2 * z + dz, 2 * y + dy, 2 * x + dx, ch);
                                    k += 1;
                                }
                            }
                        }
                        f(o, &members);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn window_pool_forward(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let out_shape = halved(x.shape())?;
    let mut out = vec![0.0; out_shape.numel()];
    let mut source = Vec::new();
    let d = x.data();
    for_each_window(x.shape(), |o, members| match mode {
        PoolMode::Max => {
            let mut best = members[0];
            for &m in &members[1..] {
                if d[m] > d[best] {
                    best = m;
                }
            }
            out[o] = d[best];
            source.push(best);
        }
        PoolMode::Avg => {
            let v: [f64; 8] = members.map(|m| d[m]);
            // pairwise, so eight equal values average back exactly
            out[o] = (((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]))) / 8.0;
        }
    })?;
    Ok((Tensor::from_op("pool", out_shape, out, x.precision())?, source))
}

fn window_pool(tape: &mut Tape, x: Var, mode: PoolMode) -> Result<Var> {
    let (out, source) = window_pool_forward(tape.value(x), mode)?;
    Ok(tape.record(out, &[x], WindowPoolOp { mode, source }))
}

struct UpsampleOp;

impl Backward for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let mut dx = vec![0.0; x.len()];
        // Each input voxel feeds exactly one 2×2×2 window of the output.
        for_each_window(grad.shape(), |o, members| {
            dx[o] = members.iter().map(|&m| grad.data()[m]).sum();
        })?;
        Ok(vec![Some(Tensor::new(
            x.shape().clone(),
            dx,
            grad.precision(),
        )?)])
    }
}

pub fn upsample_forward(x: &Tensor) -> Result<Tensor> {
    let [n, v, h, w, c] = x.shape().as_nvhwc()?;
    let out_shape = Shape::new(vec![n, 2 * v, 2 * h, 2 * w, c])?;
    let mut out = vec![0.0; out_shape.numel()];
    for_each_window(&out_shape, |o, members| {
        for &m in members {
            out[m] = x.data()[o];
        }
    })?;
    Tensor::from_op("upsample", out_shape, out, x.precision())
}

/// Nearest-neighbour ×2 upsampling of V, H and W.
pub fn upsample3d(tape: &mut Tape, x: Var) -> Result<Var> {
    let out = upsample_forward(tape.value(x))?;
    Ok(tape.record(out, &[x], UpsampleOp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::ops::basic::weighted_sum;
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: Precision = Precision::F64;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, P, |_| rng.random_range(-2.0..2.0)).unwrap()
    }

    #[test]
    fn global_pools() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 2, 2, 2, 3], P).unwrap());
        let y = pool3d(&mut tape, x, PoolMode::Avg, PoolScope::GlobalSpatial).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones(&[1, 1, 1, 1, 3], P).unwrap());

        let per_voxel = Tensor::from_fn(&[1, 2, 2, 2, 2], P, |i| if i % 2 == 0 { -1.0 } else { 4.0 }).unwrap();
        let x = tape.input(per_voxel);
        let y = pool3d(&mut tape, x, PoolMode::Max, PoolScope::GlobalChannel).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 2, 2, 2, 1], 4.0, P).unwrap());
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let x = random(&[2, 4, 6, 2, 3], 1);
        let (y, _) = window_pool_forward(&x, PoolMode::Max).unwrap();
        assert_eq!(y.dims(), &[2, 2, 3, 1, 3]);
        for flat in 0..y.len() {
            let [n, z, yy, xx, c]: [usize; 5] = y.shape().unravel(flat).try_into().unwrap();
            let mut m = f64::NEG_INFINITY;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.get(&[n, 2 * z + dz, 2 * yy + dy, 2 * xx + dx, c]).unwrap());
                    }
                }
            }
            assert_eq!(y.data()[flat], m);
        }
    }

    #[test]
    fn channel_mean_ignores_channel_order() {
        let x = random(&[1, 2, 2, 2, 8], 3);
        let perm = [5, 2, 7, 0, 1, 6, 3, 4];
        let permuted = Tensor::from_fn(x.dims(), P, |i| x.data()[i - i % 8 + perm[i % 8]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.input(x.clone());
        let b = tape.input(permuted);
        let ya = pool3d(&mut tape, a, PoolMode::Avg, PoolScope::GlobalChannel).unwrap();
        let yb = pool3d(&mut tape, b, PoolMode::Avg, PoolScope::GlobalChannel).unwrap();
        assert_eq!(tape.value(ya), tape.value(yb));
        let mean = x.reduce(&[axis::C], ReduceMode::Mean).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(mean.data()) {
            assert!((u - v).abs() < 1e-15);
        }
        let w = random(&[1, 2, 2, 2, 1], 4);
        let r = finite_diff_check(
            |t, x| {
                let y = pool3d(t, x, PoolMode::Avg, PoolScope::GlobalChannel)?;
                weighted_sum(t, y, &w)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::zeros(&[1, 3, 2, 2, 1], P).unwrap();
        assert!(window_pool_forward(&x, PoolMode::Max).is_err());
    }

    #[test]
    fn upsample_examples() {
        let y = upsample_forward(&Tensor::ones(&[1, 2, 2, 2, 1], P).unwrap()).unwrap();
        assert_eq!(y, Tensor::ones(&[1, 4, 4, 4, 1], P).unwrap());
        let hot = Tensor::from_fn(&[1, 2, 2, 2, 1], P, |i| if i == 5 { 3.0 } else { 0.0 }).unwrap();
        let y = upsample_forward(&hot).unwrap();
        let [_, z, yy, xx, _]: [usize; 5] = hot.shape().unravel(5).try_into().unwrap();
        for flat in 0..y.len() {
            let c = y.shape().unravel(flat);
            let inside = c[1] / 2 == z && c[2] / 2 == yy && c[3] / 2 == xx;
            assert_eq!(y.data()[flat], if inside { 3.0 } else { 0.0 });
        }
    }

    #[test]
    fn avg_pool_inverts_upsample() {
        let x = random(&[2, 3, 2, 5, 2], 2);
        let (back, _) = window_pool_forward(&upsample_forward(&x).unwrap(), PoolMode::Avg).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn pool_and_upsample_gradients() {
        for seed in 0..3 {
            let x = random(&[1, 2, 4, 2, 2], 10 + seed);
            let w_small = random(&[1, 1, 2, 1, 2], 20 + seed);
            let w_big = random(&[1, 4, 8, 4, 2], 30 + seed);
            for mode in [PoolMode::Max, PoolMode::Avg] {
                let r = finite_diff_check(
                    |t, x| {
                        let y = pool3d(t, x, mode, PoolScope::Window2)?;
                        weighted_sum(t, y, &w_small)
                    },
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(r.passed, "{mode:?}: {r}");
            }
            let r = finite_diff_check(
                |t, x| {
                    let y = upsample3d(t, x)?;
                    weighted_sum(t, y, &w_big)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "upsample: {r}");
        }
    }
}
