//! Self-verification suites: finite-difference gradient checks of every op,
//! block and the assembled model, plus oracle comparisons for convolution,
//! normalization statistics and attention invariants.
//!
//! Everything runs in 64-bit on generated inputs; no dataset is touched.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_diff_check_coords, finite_diff_check_params, Coords, GradCheckReport, ParamStore, Tape, Var,
};
use crate::blocks::{
    AtrousResidualPath, AttentionModule3D, ConvNormRelu, Ctx, NormKind, NormSettings, ParamBuilder,
    ResidualConvBlock,
};
use crate::error::{Error, Result};
use crate::model::{AtrousResUNet, ModelConfig};
use crate::ops::{
    add, batch_norm, concat_channels, conv3d, conv3d_forward, layer_norm, mul, pool3d, reduce, relu, scale,
    shared_mlp, sigmoid, sum_all, upsample3d, weighted_sum, ConvSpec, NormParams, PoolMode, PoolScope,
    RunningStats,
};
use crate::tensor::{axis, Precision, ReduceMode, Tensor};
use crate::train::{soft_dice_loss, DiceLossConfig};

const P: Precision = Precision::F64;

/// Relative tolerance of every gradient check.
pub const GRAD_TOL: f64 = 1e-4;
/// Largest admissible deviation from the direct-summation convolution.
pub const CONV_ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Grad,
    Oracle,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Scope::Grad),
            "oracle" => Ok(Scope::Oracle),
            "all" => Ok(Scope::All),
            other => Err(Error::Config {
                field: "scope".into(),
                reason: format!("expected grad, oracle or all, got `{other}`"),
            }),
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// Largest deviation seen, in the units of `tol`.
    pub deviation: f64,
    pub tol: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: max deviation {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.deviation,
            self.tol
        )?;
        if !self.detail.is_empty() {
            write!(f, "; {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn suite(&self, suite: &str) -> impl Iterator<Item = &CheckResult> + '_ {
        let suite = suite.to_string();
        self.checks.iter().filter(move |c| c.suite == suite)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

pub fn run(scope: Scope) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if matches!(scope, Scope::Grad | Scope::All) {
        checks.extend(grad_suite()?);
    }
    if matches!(scope, Scope::Oracle | Scope::All) {
        checks.extend(oracle_suite()?);
    }
    Ok(VerifyReport { checks })
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, P, |_| rng.random_range(lo..hi)).expect("finite")
}

/// Well-separated values in (−1, 1), none near 0, so max selections and
/// ReLU kinks stay put under finite-difference probes.
fn distinct(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks.iter().map(|&r| (r as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
    Tensor::from_vec(dims, data, P).expect("finite")
}

fn binary(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, P, |_| rng.random_range(0..2) as f64).expect("finite")
}

fn from_grad(report: GradCheckReport) -> CheckResult {
    CheckResult {
        suite: "grad",
        name: report.label.clone(),
        passed: report.passed,
        deviation: report.max_discrepancy,
        tol: report.tol,
        detail: format!("{} coordinates", report.checked),
    }
}

fn oracle(name: impl Into<String>, deviation: f64, tol: f64, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        suite: "oracle",
        name: name.into(),
        passed,
        deviation,
        tol,
        detail: detail.into(),
    }
}

/// Input-gradient check of `f` followed by a fixed random projection, so
/// every output coordinate contributes with its own weight.
fn check_input(
    name: &str,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<CheckResult> {
    let mut probe = Tape::new();
    let xv = probe.input(x.clone());
    let y = f(&mut probe, xv)?;
    let dims = probe.value(y).dims().to_vec();
    let proj = uniform(&dims, -1.0, 1.0, rng);
    let report = finite_diff_check_coords(
        |tape, xv| {
            let y = f(tape, xv)?;
            weighted_sum(tape, y, &proj)
        },
        x,
        GRAD_TOL,
        Coords::All,
        name,
    )?;
    Ok(from_grad(report))
}

fn check_params(
    name: &str,
    store: &ParamStore,
    coords: Coords,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<CheckResult> {
    Ok(from_grad(finite_diff_check_params(f, store, GRAD_TOL, coords, name)?))
}

/// Finite-difference checks of every op, every block, the dice loss and the
/// full two-level model.
pub fn grad_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut out = Vec::new();
    let feat = [1, 2, 4, 4, 3];
    let x = uniform(&feat, -1.0, 1.0, &mut rng);

    let other = uniform(&feat, -1.0, 1.0, &mut rng);
    out.push(check_input("add", &x, &mut rng, |t, v| {
        let o = t.constant(other.clone());
        add(t, v, o)
    })?);
    out.push(check_input("mul", &x, &mut rng, |t, v| {
        let o = t.constant(other.clone());
        mul(t, v, o)
    })?);
    let gate = uniform(&[1, 1, 1, 1, 3], 0.1, 0.9, &mut rng);
    out.push(check_input("mul broadcast gate", &gate, &mut rng, |t, g| {
        let o = t.constant(other.clone());
        mul(t, o, g)
    })?);
    out.push(check_input("scale", &x, &mut rng, |t, v| scale(t, v, -1.75))?);
    out.push(check_input("concat_channels", &x, &mut rng, |t, v| {
        let o = t.constant(other.clone());
        concat_channels(t, o, v)
    })?);
    out.push(check_input("sum_all", &x, &mut rng, sum_all)?);
    let spatial = [axis::V, axis::H, axis::W];
    out.push(check_input("reduce sum", &x, &mut rng, |t, v| reduce(t, v, &spatial, ReduceMode::Sum))?);
    out.push(check_input("reduce mean", &x, &mut rng, |t, v| reduce(t, v, &spatial, ReduceMode::Mean))?);
    let xd = distinct(&feat, &mut rng);
    out.push(check_input("reduce max", &xd, &mut rng, |t, v| reduce(t, v, &spatial, ReduceMode::Max))?);
    out.push(check_input("relu", &xd, &mut rng, relu)?);
    out.push(check_input("sigmoid", &x.scale(3.0)?, &mut rng, sigmoid)?);
    for (mode, mname) in [(PoolMode::Max, "max"), (PoolMode::Avg, "avg")] {
        for (scope, sname) in [
            (PoolScope::Window2, "window"),
            (PoolScope::GlobalSpatial, "global spatial"),
            (PoolScope::GlobalChannel, "global channel"),
        ] {
            let name = format!("pool {mname} {sname}");
            out.push(check_input(&name, &xd, &mut rng, |t, v| pool3d(t, v, mode, scope))?);
        }
    }
    out.push(check_input("upsample", &x, &mut rng, upsample3d)?);

    for (k, r) in [(1, 1), (3, 1), (3, 3), (3, 9), (7, 1)] {
        let spec = ConvSpec::cubic(k, r, 2, 3);
        let xi = uniform(&[1, 4, 3, 5, 2], -1.0, 1.0, &mut rng);
        let mut store = ParamStore::new();
        let w = store.add("weight", uniform(&spec.weight_dims(), -1.0, 1.0, &mut rng));
        let b = store.add("bias", uniform(&[3], -1.0, 1.0, &mut rng));
        let conv = |t: &mut Tape, s: &ParamStore, v: Var| {
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            conv3d(t, v, wv, Some(bv), &spec)
        };
        out.push(check_input(&format!("conv3d k{k} r{r} input"), &xi, &mut rng, |t, v| conv(t, &store, v))?);
        let proj = uniform(&[1, 4, 3, 5, 3], -1.0, 1.0, &mut rng);
        out.push(check_params(&format!("conv3d k{k} r{r} params"), &store, Coords::All, |t, s| {
            let v = t.constant(xi.clone());
            let y = conv(t, s, v)?;
            weighted_sum(t, y, &proj)
        })?);
    }

    let mut store = ParamStore::new();
    let gamma = store.add("gamma", uniform(&[3], 0.5, 1.5, &mut rng));
    let beta = store.add("beta", uniform(&[3], -0.5, 0.5, &mut rng));
    let norm_x = uniform(&[2, 3, 2, 4, 3], -2.0, 2.0, &mut rng);
    let running = RunningStats {
        mean: Tensor::zeros(&[3], P)?,
        var: Tensor::ones(&[3], P)?,
    };
    let norm = |t: &mut Tape, s: &ParamStore, v: Var, batch: bool| {
        let p = NormParams {
            gamma: t.param(s, gamma),
            beta: t.param(s, beta),
            eps: 1e-5,
        };
        if batch {
            Ok(batch_norm(t, v, &p, &running, 0.99, true)?.0)
        } else {
            layer_norm(t, v, &p)
        }
    };
    for (batch, name) in [(false, "layer_norm"), (true, "batch_norm")] {
        out.push(check_input(&format!("{name} input"), &norm_x, &mut rng, |t, v| norm(t, &store, v, batch))?);
        let proj = uniform(norm_x.dims(), -1.0, 1.0, &mut rng);
        out.push(check_params(&format!("{name} affine"), &store, Coords::All, |t, s| {
            let v = t.constant(norm_x.clone());
            let y = norm(t, s, v, batch)?;
            weighted_sum(t, y, &proj)
        })?);
    }

    let mut store = ParamStore::new();
    let w0 = store.add("mlp0", uniform(&[1, 1, 1, 16, 2], -1.0, 1.0, &mut rng));
    let w1 = store.add("mlp1", uniform(&[1, 1, 1, 2, 16], -1.0, 1.0, &mut rng));
    let pooled = distinct(&[2, 1, 1, 1, 16], &mut rng);
    let proj = uniform(&[2, 1, 1, 1, 16], -1.0, 1.0, &mut rng);
    out.push(check_params("shared_mlp", &store, Coords::All, |t, s| {
        let v = t.constant(pooled.clone());
        let (a, b) = (t.param(s, w0), t.param(s, w1));
        let y = shared_mlp(t, v, a, b)?;
        weighted_sum(t, y, &proj)
    })?);

    let pred = uniform(&[2, 3, 3, 2, 1], 0.05, 0.95, &mut rng);
    let gt = binary(pred.dims(), &mut rng);
    for per_sample in [false, true] {
        let cfg = DiceLossConfig {
            per_sample,
            ..DiceLossConfig::default()
        };
        let name = if per_sample { "dice loss per-sample" } else { "dice loss global" };
        let report =
            finite_diff_check_coords(|t, v| soft_dice_loss(t, v, &gt, &cfg), &pred, GRAD_TOL, Coords::All, name)?;
        out.push(from_grad(report));
    }

    out.extend(block_checks(&mut rng)?);
    out.extend(model_checks(&mut rng)?);
    Ok(out)
}

fn check_block(
    name: &str,
    store: &ParamStore,
    x: &Tensor,
    out_channels: usize,
    rng: &mut ChaCha8Rng,
    forward: impl Fn(&mut Ctx, Var) -> Result<Var>,
) -> Result<[CheckResult; 2]> {
    let coords = Coords::Sample { per_tensor: 12, seed: 22 };
    let mut dims = x.dims().to_vec();
    dims[4] = out_channels;
    let proj = uniform(&dims, -1.0, 1.0, rng);
    let params = check_params(&format!("{name} params"), store, coords, |t, s| {
        let v = t.constant(x.clone());
        let mut ctx = Ctx::new(t, s, true);
        let y = forward(&mut ctx, v)?;
        weighted_sum(ctx.tape, y, &proj)
    })?;
    let report = finite_diff_check_coords(
        |t, v| {
            let mut ctx = Ctx::new(t, store, true);
            let y = forward(&mut ctx, v)?;
            weighted_sum(ctx.tape, y, &proj)
        },
        x,
        GRAD_TOL,
        coords,
        &format!("{name} input"),
    )?;
    Ok([params, from_grad(report)])
}

fn block_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let ln = NormSettings {
        kind: NormKind::Layer,
        eps: 1e-5,
        momentum: 0.99,
    };
    let bn = NormSettings {
        kind: NormKind::Batch,
        ..ln
    };
    let x1 = uniform(&[1, 4, 4, 4, 8], -1.0, 1.0, rng);
    let x2 = uniform(&[2, 4, 4, 4, 8], -1.0, 1.0, rng);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let arp = AtrousResidualPath::new(&mut ParamBuilder::new(&mut store, 21, P), "arp", 8, ln)?;
    out.extend(check_block("arp", &store, &x1, 8, rng, |ctx, v| arp.forward(ctx, v))?);

    let mut store = ParamStore::new();
    let att = AttentionModule3D::new(&mut ParamBuilder::new(&mut store, 22, P), "attention", 8)?;
    out.extend(check_block("attention", &store, &x1, 8, rng, |ctx, v| att.forward(ctx, v))?);

    let mut store = ParamStore::new();
    let res = ResidualConvBlock::new(&mut ParamBuilder::new(&mut store, 23, P), "residual", 8, 16, ln)?;
    out.extend(check_block("residual block", &store, &x1, 16, rng, |ctx, v| res.forward(ctx, v))?);

    let mut store = ParamStore::new();
    let spec = ConvSpec::cubic(3, 1, 8, 8);
    let cnr = ConvNormRelu::new(&mut ParamBuilder::new(&mut store, 24, P), "conv_bn_relu", spec, bn)?;
    out.extend(check_block("conv-bn-relu", &store, &x2, 8, rng, |ctx, v| cnr.forward(ctx, v))?);
    Ok(out)
}

fn model_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (kind, n) in [(NormKind::Layer, 1), (NormKind::Batch, 2)] {
        let config = ModelConfig {
            levels: 2,
            base_channels: 8,
            input_shape: [8, 8, 8],
            norm_kind: kind,
            precision: P,
            seed: 31,
            ..ModelConfig::default()
        };
        let model = AtrousResUNet::build(&config)?;
        let x = uniform(&[n, 8, 8, 8, 1], 0.0, 1.0, rng);
        let gt = binary(x.dims(), rng);
        let dice = DiceLossConfig::default();
        let loss = |t: &mut Tape, s: &ParamStore, v: Var| {
            let mut ctx = Ctx::new(t, s, true);
            let y = model.forward(&mut ctx, v)?;
            soft_dice_loss(ctx.tape, y, &gt, &dice)
        };
        let name = format!("model levels=2 {kind}");
        out.push(check_params(&format!("{name} params"), model.store(), Coords::Sample { per_tensor: 3, seed: 32 }, |t, s| {
            let v = t.constant(x.clone());
            loss(t, s, v)
        })?);
        let report = finite_diff_check_coords(
            |t, v| loss(t, model.store(), v),
            &x,
            GRAD_TOL,
            Coords::Sample { per_tensor: 24, seed: 33 },
            &format!("{name} input"),
        )?;
        out.push(from_grad(report));
    }
    Ok(out)
}

/// Direct nested-loop convolution with "same" padding, stride 1.
pub fn naive_conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let [n, v, h, wd, cin] = x.shape().as_nvhwc()?;
    let [kv, kh, kw] = spec.kernel;
    let r = spec.dilation as isize;
    let cout = spec.out_channels;
    let pad = |k: usize| ((k - 1) * spec.dilation / 2) as isize;
    let (pv, ph, pw) = (pad(kv), pad(kh), pad(kw));
    let mut out = vec![0.0; n * v * h * wd * cout];
    for s in 0..n {
        for z in 0..v {
            for y in 0..h {
                for xx in 0..wd {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for a in 0..kv {
                            for bb in 0..kh {
                                for c in 0..kw {
                                    let iz = z as isize + a as isize * r - pv;
                                    let iy = y as isize + bb as isize * r - ph;
                                    let ix = xx as isize + c as isize * r - pw;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= v as isize || iy >= h as isize || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        acc += x.get(&[s, iz as usize, iy as usize, ix as usize, ci])?
                                            * w.get(&[a, bb, c, ci, co])?;
                                    }
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += b.data()[co];
                        }
                        out[(((s * v + z) * h + y) * wd + xx) * cout + co] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, v, h, wd, cout], out, P)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.dims() != b.dims() {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Kernel of a dilated convolution spread onto the dense grid it covers.
pub fn zero_inflate(w: &Tensor, dilation: usize) -> Result<Tensor> {
    let [k0, k1, k2, cin, cout] = w.shape().as_nvhwc()?;
    let ext = |k: usize| (k - 1) * dilation + 1;
    let dims = [ext(k0), ext(k1), ext(k2), cin, cout];
    let mut data = vec![0.0; dims.iter().product()];
    for a in 0..k0 {
        for b in 0..k1 {
            for c in 0..k2 {
                for ci in 0..cin {
                    for co in 0..cout {
                        let idx = (((a * dilation * dims[1] + b * dilation) * dims[2] + c * dilation) * cin + ci) * cout + co;
                        data[idx] = w.get(&[a, b, c, ci, co])?;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&dims, data, w.precision())
}

/// Oracle comparisons: convolution against direct summation, the dilation
/// identity, normalization statistics and batch behaviour, and the
/// attention contracts.
pub fn oracle_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f72_6163);
    let mut out = Vec::new();

    for (k, r) in [(1, 1), (3, 1), (3, 3), (3, 9), (7, 1)] {
        let mut worst: f64 = 0.0;
        let cases = 5;
        for _ in 0..cases {
            let n = rng.random_range(1..=2);
            let ext: Vec<usize> = (0..3).map(|_| rng.random_range(3..=10)).collect();
            let cin = rng.random_range(1..=3);
            let cout = rng.random_range(1..=3);
            let spec = ConvSpec::cubic(k, r, cin, cout);
            let x = uniform(&[n, ext[0], ext[1], ext[2], cin], -1.0, 1.0, &mut rng);
            let w = uniform(&spec.weight_dims(), -1.0, 1.0, &mut rng);
            let b = uniform(&[cout], -1.0, 1.0, &mut rng);
            let got = conv3d_forward(&x, &w, Some(&b), &spec)?;
            worst = worst.max(max_abs_diff(&got, &naive_conv3d(&x, &w, Some(&b), &spec)?));
        }
        out.push(oracle(
            format!("conv3d k{k} r{r} vs direct summation"),
            worst,
            CONV_ORACLE_TOL,
            worst < CONV_ORACLE_TOL,
            format!("{cases} random inputs"),
        ));
    }

    for r in [1, 3, 9] {
        let mut worst: f64 = 0.0;
        for _ in 0..2 {
            let ext: Vec<usize> = (0..3).map(|_| rng.random_range(4..=11)).collect();
            let spec = ConvSpec::cubic(3, r, 2, 2);
            let x = uniform(&[1, ext[0], ext[1], ext[2], 2], -1.0, 1.0, &mut rng);
            let w = uniform(&spec.weight_dims(), -1.0, 1.0, &mut rng);
            let dense_w = zero_inflate(&w, r)?;
            let dense = ConvSpec::cubic(dense_w.dims()[0], 1, 2, 2);
            let a = conv3d_forward(&x, &w, None, &spec)?;
            let b = conv3d_forward(&x, &dense_w, None, &dense)?;
            worst = worst.max(max_abs_diff(&a, &b));
        }
        out.push(oracle(
            format!("dilation r{r} equals zero-inflated dense kernel"),
            worst,
            0.0,
            worst == 0.0,
            "exact",
        ));
    }

    out.extend(norm_checks(&mut rng)?);
    out.extend(attention_checks(&mut rng)?);
    Ok(out)
}

fn unit_affine(tape: &mut Tape, c: usize) -> Result<NormParams> {
    Ok(NormParams {
        gamma: tape.constant(Tensor::ones(&[c], P)?),
        beta: tape.constant(Tensor::zeros(&[c], P)?),
        eps: 1e-5,
    })
}

fn layer_norm_value(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = unit_affine(&mut tape, x.dims()[4])?;
    let y = layer_norm(&mut tape, v, &p)?;
    Ok(tape.value(y).clone())
}

fn batch_norm_train_value(x: &Tensor) -> Result<Tensor> {
    let c = x.dims()[4];
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = unit_affine(&mut tape, c)?;
    let running = RunningStats {
        mean: Tensor::zeros(&[c], P)?,
        var: Tensor::ones(&[c], P)?,
    };
    let (y, _) = batch_norm(&mut tape, v, &p, &running, 0.99, true)?;
    Ok(tape.value(y).clone())
}

/// Mean and biased variance of each (sample, channel) slice of `t`.
fn slice_stats(t: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [n, v, h, w, c] = t.shape().as_nvhwc()?;
    let voxels = v * h * w;
    let mut stats = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let vals: Vec<f64> = (0..voxels).map(|i| t.data()[(s * voxels + i) * c + ch]).collect();
            let mean = vals.iter().sum::<f64>() / voxels as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / voxels as f64;
            stats.push((mean, var));
        }
    }
    Ok(stats)
}

fn take_sample(t: &Tensor, s: usize) -> Result<Tensor> {
    let mut dims = t.dims().to_vec();
    let per: usize = dims[1..].iter().product();
    dims[0] = 1;
    Tensor::from_vec(&dims, t.data()[s * per..(s + 1) * per].to_vec(), t.precision())
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut dims = a.dims().to_vec();
    dims[0] += b.dims()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&dims, data, a.precision())
}

fn bit_diff(a: &Tensor, b: &Tensor) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
        + a.len().abs_diff(b.len())
}

fn norm_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    // per-channel offsets and scales so normalization has work to do
    let raw = uniform(&[3, 5, 4, 6, 4], -1.0, 1.0, rng);
    let c = 4;
    let x = Tensor::from_fn(raw.dims(), P, |i| {
        let ch = i % c;
        raw.data()[i] * (1.0 + 2.0 * ch as f64) + 3.0 * ch as f64 - 4.0
    })?;
    let stats = slice_stats(&layer_norm_value(&x)?)?;
    let mean_dev = stats.iter().map(|s| s.0.abs()).fold(0.0, f64::max);
    let var_dev = stats.iter().map(|s| (s.1 - 1.0).abs()).fold(0.0, f64::max);
    out.push(oracle("layer_norm per-(sample,channel) mean", mean_dev, 1e-6, mean_dev < 1e-6, ""));
    out.push(oracle("layer_norm per-(sample,channel) variance", var_dev, 1e-4, var_dev < 1e-4, ""));

    let y = batch_norm_train_value(&x)?;
    let [n, v, h, w, _] = y.shape().as_nvhwc()?;
    let count = (n * v * h * w) as f64;
    let mut bn_mean_dev: f64 = 0.0;
    let mut bn_var_dev: f64 = 0.0;
    for ch in 0..c {
        let vals: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
        bn_mean_dev = bn_mean_dev.max(mean.abs());
        bn_var_dev = bn_var_dev.max((var - 1.0).abs());
    }
    out.push(oracle("batch_norm per-channel mean", bn_mean_dev, 1e-6, bn_mean_dev < 1e-6, "training mode"));
    out.push(oracle("batch_norm per-channel variance", bn_var_dev, 1e-4, bn_var_dev < 1e-4, "training mode"));

    let pair = uniform(&[2, 4, 3, 5, 3], -2.0, 2.0, rng);
    let joint = layer_norm_value(&pair)?;
    let mut differing = 0;
    for s in 0..2 {
        differing += bit_diff(&take_sample(&joint, s)?, &layer_norm_value(&take_sample(&pair, s)?)?);
    }
    out.push(oracle(
        "layer_norm batch composition invariance",
        differing as f64,
        0.0,
        differing == 0,
        "differing elements, batch 2 vs batch 1",
    ));

    // same first sample, different partner
    let a = take_sample(&pair, 0)?;
    let partner1 = take_sample(&pair, 1)?;
    let partner2 = partner1.scale(3.0)?.add(&Tensor::full(partner1.dims(), 2.0, P)?)?;
    let with1 = take_sample(&batch_norm_train_value(&stack(&a, &partner1)?)?, 0)?;
    let with2 = take_sample(&batch_norm_train_value(&stack(&a, &partner2)?)?, 0)?;
    let shift = max_abs_diff(&with1, &with2);
    out.push(oracle(
        "batch_norm output depends on batch partner",
        shift,
        1e-3,
        shift > 1e-3,
        "deviation must exceed tol",
    ));

    let config = ModelConfig {
        levels: 2,
        base_channels: 8,
        input_shape: [8, 8, 8],
        precision: P,
        seed: 41,
        ..ModelConfig::default()
    };
    let model = AtrousResUNet::build(&config)?;
    let xs = uniform(&[2, 8, 8, 8, 1], 0.0, 1.0, rng);
    let joint = model.infer(&xs)?;
    let mut differing = 0;
    for s in 0..2 {
        differing += bit_diff(&take_sample(&joint, s)?, &model.infer(&take_sample(&xs, s)?)?);
    }
    out.push(oracle(
        "layer-norm model batch composition invariance",
        differing as f64,
        0.0,
        differing == 0,
        "differing voxels, batch 2 vs batch 1",
    ));
    Ok(out)
}

fn dyadic(dims: &[usize], range: i32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, P, |_| rng.random_range(-range..=range) as f64 / 8.0).expect("finite")
}

fn permute_axis(t: &Tensor, axis_len: usize, inner: usize, perm: &[usize]) -> Result<Tensor> {
    // element (outer, j, inner) of the result is (outer, perm[j], inner) of t
    let block = axis_len * inner;
    let data = (0..t.len())
        .map(|i| {
            let (outer, rest) = (i / block, i % block);
            let (j, k) = (rest / inner, rest % inner);
            t.data()[outer * block + perm[j] * inner + k]
        })
        .collect();
    Tensor::new(t.shape().clone(), data, t.precision())
}

fn attention_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let c = 16;
    let mut store = ParamStore::new();
    let att = AttentionModule3D::new(&mut ParamBuilder::new(&mut store, 51, P), "attention", c)?;
    let run = |store: &ParamStore, x: &Tensor| -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let mut ctx = Ctx::new(&mut tape, store, false);
        let maps = att.forward_maps(&mut ctx, v)?;
        Ok([maps.channel, maps.volume, maps.output].map(|m| tape.value(m).clone()))
    };

    let mut shape_ok = true;
    let mut open_ok = true;
    let mut worst_growth: f64 = 0.0;
    for _ in 0..4 {
        let x = uniform(&[2, 4, 3, 5, c], -3.0, 3.0, rng);
        let [mc, mv, y] = run(&store, &x)?;
        shape_ok &= mc.dims() == [2, 1, 1, 1, c] && mv.dims() == [2, 4, 3, 5, 1];
        open_ok &= mc.data().iter().chain(mv.data()).all(|&g| g > 0.0 && g < 1.0);
        for (o, i) in y.data().iter().zip(x.data()) {
            worst_growth = worst_growth.max(o.abs() - i.abs());
        }
    }
    out.push(oracle("attention map shapes", 0.0, 0.0, shape_ok, "M_c (N,1,1,1,C), M_v (N,V,H,W,1)"));
    out.push(oracle("attention gates strictly inside (0,1)", 0.0, 0.0, open_ok, ""));
    out.push(oracle(
        "attention output bounded by input",
        worst_growth.max(0.0),
        0.0,
        worst_growth <= 0.0,
        "max of |F''| - |F|",
    ));

    // dyadic values keep every channel sum exact, so permuting channels
    // changes no rounding
    let hidden = c / 8;
    let w0 = dyadic(&[1, 1, 1, c, hidden], 8, rng);
    let w1 = dyadic(&[1, 1, 1, hidden, c], 8, rng);
    store.set_value(att.mlp_in, w0.clone())?;
    store.set_value(att.mlp_out, w1.clone())?;
    let mut differing = 0;
    for _ in 0..3 {
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(rng);
        let x = dyadic(&[1, 4, 4, 4, c], 16, rng);
        let xp = permute_axis(&x, c, 1, &perm)?;
        let mut permuted = store.clone();
        permuted.set_value(att.mlp_in, permute_axis(&w0, c, hidden, &perm)?)?;
        permuted.set_value(att.mlp_out, permute_axis(&w1, c, 1, &perm)?)?;
        let [_, _, y] = run(&store, &x)?;
        let [_, _, yp] = run(&permuted, &xp)?;
        differing += bit_diff(&permute_axis(&y, c, 1, &perm)?, &yp);
    }
    out.push(oracle(
        "attention channel-permutation equivariance",
        differing as f64,
        0.0,
        differing == 0,
        "differing elements over 3 permutations",
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::fault;

    #[test]
    fn suites_pass() {
        let report = run(Scope::All).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.suite("grad").count() > 40);
        assert!(report.suite("oracle").count() > 10);
    }

    #[test]
    fn grad_suite_catches_flipped_conv_gradient() {
        let _guard = fault::flip_conv_input_grad();
        let checks = grad_suite().unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.iter().any(|n| n.starts_with("conv3d") && n.ends_with("input")), "{failed:?}");
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("grad".parse::<Scope>().unwrap(), Scope::Grad);
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn zero_inflation_places_taps() {
        let w = Tensor::from_fn(&[3, 3, 3, 1, 1], P, |i| i as f64 + 1.0).unwrap();
        let d = zero_inflate(&w, 3).unwrap();
        assert_eq!(d.dims(), &[7, 7, 7, 1, 1]);
        assert_eq!(d.get(&[6, 3, 0, 0, 0]).unwrap(), w.get(&[2, 1, 0, 0, 0]).unwrap());
        assert_eq!(d.data().iter().filter(|&&v| v != 0.0).count(), 27);
    }
}
