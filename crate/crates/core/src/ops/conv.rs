//! Dilated 3D convolution over `(N, V, H, W, C)` feature maps.
//!
//! Weights are laid out `(kV, kH, kW, Cin, Cout)` so the innermost loops run
//! over contiguous output channels. Each output voxel accumulates bias first,
//! then kernel taps in row-major tap order, then input channels in order;
//! that order is fixed, which makes results reproducible bit-for-bit.
//!
//! Tap `k` of an output at `o` reads input position `o·stride + k·dilation −
//! pad_before`; positions outside the input read zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `output = ceil(input / stride)`; when the total
    /// padding is odd the extra voxel goes on the trailing side.
    #[default]
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub stride: usize,
}

impl ConvSpec {
    /// Cubic kernel, SAME padding, stride 1.
    pub fn cubic(k: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel: [k; 3],
            dilation,
            in_channels,
            out_channels,
            padding: Padding::Same,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) {
            return Err(Error::invalid(format!("kernel extents {:?} must be ≥ 1", self.kernel)));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("dilation rate must be ≥ 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be ≥ 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be ≥ 1"));
        }
        Ok(())
    }

    /// `k + (k − 1)(r − 1)` along `axis` (0 = V, 1 = H, 2 = W).
    pub fn effective_extent(&self, axis: usize) -> usize {
        let k = self.kernel[axis];
        k + (k - 1) * (self.dilation - 1)
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        [
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
            self.in_channels,
            self.out_channels,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    /// Output extent and leading pad for one spatial axis.
    pub fn axis_geometry(&self, axis: usize, input: usize) -> Result<(usize, usize)> {
        let eff = self.effective_extent(axis);
        let s = self.stride;
        match self.padding {
            Padding::Same => {
                let out = input.div_ceil(s);
                let total = ((out - 1) * s + eff).saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if eff > input {
                    return Err(Error::invalid(format!(
                        "effective kernel extent {eff} exceeds padded input extent {input} on axis {axis}"
                    )));
                }
                Ok(((input - eff) / s + 1, 0))
            }
        }
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok([
            self.axis_geometry(0, input[0])?.0,
            self.axis_geometry(1, input[1])?.0,
            self.axis_geometry(2, input[2])?.0,
        ])
    }
}

/// Valid `(tap, input position)` pairs for each output position on one axis.
struct AxisTaps {
    by_output: Vec<Vec<(usize, usize)>>,
    /// Inverse: `(tap, output position)` pairs for each input position.
    by_input: Vec<Vec<(usize, usize)>>,
}

impl AxisTaps {
    fn new(spec: &ConvSpec, axis: usize, input: usize) -> Result<Self> {
        let (out, pad) = spec.axis_geometry(axis, input)?;
        let k = spec.kernel[axis];
        let mut by_output = Vec::with_capacity(out);
        let mut by_input = vec![Vec::new(); input];
        for o in 0..out {
            let mut taps = Vec::with_capacity(k);
            for t in 0..k {
                let pos = (o * spec.stride + t * spec.dilation) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < input {
                    taps.push((t, pos as usize));
                    by_input[pos as usize].push((t, o));
                }
            }
            by_output.push(taps);
        }
        Ok(AxisTaps {
            by_output,
            by_input,
        })
    }

    fn output_len(&self) -> usize {
        self.by_output.len()
    }
}

struct Geometry {
    n: usize,
    input: [usize; 3],
    output: [usize; 3],
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    taps: [AxisTaps; 3],
}

impl Geometry {
    fn new(x: &Shape, w: &Shape, b: Option<&Shape>, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let [n, v, h, wd, c] = x.as_nvhwc()?;
        if c != spec.in_channels {
            return Err(Error::invalid(format!(
                "conv3d expects {} input channels, input {x} has {c}",
                spec.in_channels
            )));
        }
        if w.dims() != spec.weight_dims() {
            return Err(Error::ShapeMismatch {
                op: "conv3d weight",
                lhs: Shape::new(spec.weight_dims().to_vec())?,
                rhs: w.clone(),
            });
        }
        if let Some(b) = b {
            if b.dims() != [spec.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d bias",
                    lhs: Shape::new(vec![spec.out_channels])?,
                    rhs: b.clone(),
                });
            }
        }
        let taps = [
            AxisTaps::new(spec, 0, v)?,
            AxisTaps::new(spec, 1, h)?,
            AxisTaps::new(spec, 2, wd)?,
        ];
        let output = [taps[0].output_len(), taps[1].output_len(), taps[2].output_len()];
        Ok(Geometry {
            n,
            input: [v, h, wd],
            output,
            cin: c,
            cout: spec.out_channels,
            kernel: spec.kernel,
            taps,
        })
    }

    #[inline]
    fn in_offset(&self, n: usize, v: usize, h: usize, w: usize) -> usize {
        (((n * self.input[0] + v) * self.input[1] + h) * self.input[2] + w) * self.cin
    }

    #[inline]
    fn out_offset(&self, n: usize, v: usize, h: usize, w: usize) -> usize {
        (((n * self.output[0] + v) * self.output[1] + h) * self.output[2] + w) * self.cout
    }

    #[inline]
    fn w_offset(&self, a: usize, b: usize, c: usize) -> usize {
        ((a * self.kernel[1] + b) * self.kernel[2] + c) * self.cin * self.cout
    }

    fn out_shape(&self) -> Result<Shape> {
        Shape::new(vec![
            self.n,
            self.output[0],
            self.output[1],
            self.output[2],
            self.cout,
        ])
    }
}

#[inline]
fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            s[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + tail
}

/// `y[o] = bias + Σ_k Σ_ci x[o·s + k·r − pad, ci] · w[k, ci, ·]`.
pub fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = Geometry::new(x.shape(), w.shape(), bias.map(|b| b.shape()), spec)?;
    let out_shape = g.out_shape()?;
    let mut out = vec![0.0; out_shape.numel()];
    let (xd, wd) = (x.data(), w.data());
    let (cin, cout) = (g.cin, g.cout);
    for n in 0..g.n {
        for ov in 0..g.output[0] {
            for oh in 0..g.output[1] {
                for ow in 0..g.output[2] {
                    let o_off = g.out_offset(n, ov, oh, ow);
                    let acc = &mut out[o_off..o_off + cout];
                    if let Some(b) = bias {
                        acc.copy_from_slice(b.data());
                    }
                    for &(a, iv) in &g.taps[0].by_output[ov] {
                        for &(b, ih) in &g.taps[1].by_output[oh] {
                            for &(c, iw) in &g.taps[2].by_output[ow] {
                                let xs = &xd[g.in_offset(n, iv, ih, iw)..][..cin];
                                let ws = &wd[g.w_offset(a, b, c)..][..cin * cout];
                                for (ci, &xv) in xs.iter().enumerate() {
                                    axpy(acc, xv, &ws[ci * cout..(ci + 1) * cout]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let precision = bias
        .map_or(x.precision().join(w.precision()), |b| {
            x.precision().join(w.precision()).join(b.precision())
        });
    Tensor::from_op("conv3d", out_shape, out, precision)
}

/// Gradient with respect to the input, gathered per input voxel.
pub fn conv3d_backward_input(
    x_shape: &Shape,
    w: &Tensor,
    grad: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = Geometry::new(x_shape, w.shape(), None, spec)?;
    let mut dx = vec![0.0; x_shape.numel()];
    let (wd, gd) = (w.data(), grad.data());
    let (cin, cout) = (g.cin, g.cout);
    let sign = if fault::conv_input_grad_flipped() { -1.0 } else { 1.0 };
    for n in 0..g.n {
        for iv in 0..g.input[0] {
            for ih in 0..g.input[1] {
                for iw in 0..g.input[2] {
                    let i_off = g.in_offset(n, iv, ih, iw);
                    let acc = &mut dx[i_off..i_off + cin];
                    for &(a, ov) in &g.taps[0].by_input[iv] {
                        for &(b, oh) in &g.taps[1].by_input[ih] {
                            for &(c, ow) in &g.taps[2].by_input[iw] {
                                let gy = &gd[g.out_offset(n, ov, oh, ow)..][..cout];
                                let ws = &wd[g.w_offset(a, b, c)..][..cin * cout];
                                for (ci, slot) in acc.iter_mut().enumerate() {
                                    *slot += dot(&ws[ci * cout..(ci + 1) * cout], gy);
                                }
                            }
                        }
                    }
                    if sign < 0.0 {
                        for slot in acc.iter_mut() {
                            *slot = -*slot;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op("conv3d_backward_input", x_shape.clone(), dx, grad.precision())
}

/// Gradients with respect to weight and bias.
pub fn conv3d_backward_params(
    x: &Tensor,
    w_shape: &Shape,
    grad: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    let g = Geometry::new(x.shape(), w_shape, None, spec)?;
    let mut dw = vec![0.0; w_shape.numel()];
    let mut db = vec![0.0; g.cout];
    let (xd, gd) = (x.data(), grad.data());
    let (cin, cout) = (g.cin, g.cout);
    for n in 0..g.n {
        for ov in 0..g.output[0] {
            for oh in 0..g.output[1] {
                for ow in 0..g.output[2] {
                    let gy = &gd[g.out_offset(n, ov, oh, ow)..][..cout];
                    for (d, &v) in db.iter_mut().zip(gy) {
                        *d += v;
                    }
                    for &(a, iv) in &g.taps[0].by_output[ov] {
                        for &(b, ih) in &g.taps[1].by_output[oh] {
                            for &(c, iw) in &g.taps[2].by_output[ow] {
                                let xs = &xd[g.in_offset(n, iv, ih, iw)..][..cin];
                                let w_off = g.w_offset(a, b, c);
                                let block = &mut dw[w_off..w_off + cin * cout];
                                for (ci, &xv) in xs.iter().enumerate() {
                                    axpy(&mut block[ci * cout..(ci + 1) * cout], xv, gy);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_op("conv3d_backward_weight", w_shape.clone(), dw, grad.precision())?,
        Tensor::from_op(
            "conv3d_backward_bias",
            Shape::new(vec![cout])?,
            db,
            grad.precision(),
        )?,
    ))
}

struct Conv3dOp {
    spec: ConvSpec,
}

impl Backward for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    // Saves only the spec; the input and weights are read back from the tape.
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let dx = if needs[0] {
            Some(conv3d_backward_input(x.shape(), w, grad, &self.spec)?)
        } else {
            None
        };
        let param_grads = if needs[1..].iter().any(|&n| n) {
            Some(conv3d_backward_params(x, w.shape(), grad, &self.spec)?)
        } else {
            None
        };
        let mut out = vec![dx];
        match param_grads {
            Some((dw, db)) => {
                out.push(needs[1].then_some(dw));
                if inputs.len() == 3 {
                    out.push(needs[2].then_some(db));
                }
            }
            None => out.extend(std::iter::repeat_n(None, inputs.len() - 1)),
        }
        Ok(out)
    }
}

/// Differentiable dilated convolution; `bias` is optional.
pub fn conv3d(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
    let out = conv3d_forward(
        tape.value(x),
        tape.value(w),
        bias.map(|b| tape.value(b)),
        spec,
    )?;
    let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
    Ok(tape.record(out, &inputs, Conv3dOp { spec: *spec }))
}

/// Mutation hooks used to prove that the gradient suites detect a broken
/// backward rule. Thread-local, so an injected fault never leaks into other
/// tests running concurrently.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static FLIP_INPUT_GRAD: Cell<bool> = const { Cell::new(false) };
    }

    pub(crate) fn conv_input_grad_flipped() -> bool {
        FLIP_INPUT_GRAD.with(|f| f.get())
    }

    /// Clears the injected fault when dropped.
    pub struct FaultGuard(());

    impl Drop for FaultGuard {
        fn drop(&mut self) {
            FLIP_INPUT_GRAD.with(|f| f.set(false));
        }
    }

    /// Negates the input gradient of every conv3d backward on this thread.
    pub fn flip_conv_input_grad() -> FaultGuard {
        FLIP_INPUT_GRAD.with(|f| f.set(true));
        FaultGuard(())
    }
}
