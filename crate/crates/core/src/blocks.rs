//! The network's building blocks: convolution with normalization, the
//! residual encoder block, the atrous residual path used on skip connections
//! and the channel-then-volume attention module used in the decoder.
//!
//! Blocks own only [`ParamId`]s; their values live in a [`ParamStore`] and are
//! bound to a tape through a [`Ctx`] for one forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{
    self, add, batch_norm, concat_channels, conv3d, layer_norm, mul, pool3d, relu, shared_mlp, sigmoid,
    ConvSpec, NormParams, PoolMode, PoolScope, RunningStats,
};
use crate::tensor::{Precision, Tensor};

/// Kernel extent of the volume-attention convolution.
pub const ATTENTION_KERNEL: usize = 7;

/// One forward pass: the tape being recorded, the parameters it reads and
/// whether normalization layers run in training mode.
pub struct Ctx<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    training: bool,
    stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, training: bool) -> Self {
        Ctx {
            tape,
            store,
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Batch-norm running statistics produced by this pass, to be written
    /// back once the step is accepted.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Layer,
    Batch,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Layer => "layer",
            NormKind::Batch => "batch",
        })
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(NormKind::Layer),
            "batch" => Ok(NormKind::Batch),
            other => Err(Error::config("norm", format!("expected `layer` or `batch`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub kind: NormKind,
    pub eps: f64,
    pub momentum: f64,
}

/// Creates named parameters with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    precision: Precision,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, precision: Precision) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            precision,
        }
    }

    /// He-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn conv_weight(&mut self, name: String, spec: &ConvSpec) -> Result<ParamId> {
        let limit = (6.0 / spec.fan_in() as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(&spec.weight_dims(), self.precision, |_| rng.random_range(-limit..limit))?;
        Ok(self.store.add(name, value))
    }

    pub fn constant(&mut self, name: String, dims: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(dims, value, self.precision)?))
    }

    pub fn buffer(&mut self, name: String, dims: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.add_buffer(name, Tensor::full(dims, value, self.precision)?))
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let weight = b.conv_weight(format!("{name}.weight"), &spec)?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), &[spec.out_channels], 0.0)?)
        } else {
            None
        };
        Ok(ConvLayer { spec, weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        conv3d(ctx.tape, x, w, b, &self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub settings: NormSettings,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Running mean and variance, batch norm only.
    pub running: Option<(ParamId, ParamId)>,
}

impl Norm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, settings: NormSettings) -> Result<Self> {
        let gamma = b.constant(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = b.constant(format!("{name}.beta"), &[channels], 0.0)?;
        let running = match settings.kind {
            NormKind::Layer => None,
            NormKind::Batch => Some((
                b.buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
                b.buffer(format!("{name}.running_var"), &[channels], 1.0)?,
            )),
        };
        Ok(Norm {
            settings,
            gamma,
            beta,
            running,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let p = NormParams {
            gamma: ctx.param(self.gamma),
            beta: ctx.param(self.beta),
            eps: self.settings.eps,
        };
        match self.running {
            None => layer_norm(ctx.tape, x, &p),
            Some((mean_id, var_id)) => {
                let store = ctx.store();
                let running = RunningStats {
                    mean: store.get(mean_id).value.clone(),
                    var: store.get(var_id).value.clone(),
                };
                let (y, updated) = batch_norm(ctx.tape, x, &p, &running, self.settings.momentum, ctx.training)?;
                if let Some(u) = updated {
                    ctx.stat_updates.push((mean_id, u.mean));
                    ctx.stat_updates.push((var_id, u.var));
                }
                Ok(y)
            }
        }
    }
}

/// `relu(norm(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ConvNormRelu {
    pub conv: ConvLayer,
    pub norm: Norm,
}

impl ConvNormRelu {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: ConvSpec, norm: NormSettings) -> Result<Self> {
        Ok(ConvNormRelu {
            conv: ConvLayer::new(b, &format!("{name}.conv"), spec, true)?,
            norm: Norm::new(b, &format!("{name}.norm"), spec.out_channels, norm)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        relu(ctx.tape, y)
    }
}

/// Two 3×3×3 conv-norm-relu stages plus a shortcut, projected by a 1×1×1
/// convolution when the channel count changes. No activation follows the
/// addition.
#[derive(Debug, Clone)]
pub struct ResidualConvBlock {
    pub first: ConvNormRelu,
    pub second: ConvNormRelu,
    pub projection: Option<ConvLayer>,
}

impl ResidualConvBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, norm: NormSettings) -> Result<Self> {
        Ok(ResidualConvBlock {
            first: ConvNormRelu::new(b, &format!("{name}.conv1"), ConvSpec::cubic(3, 1, cin, cout), norm)?,
            second: ConvNormRelu::new(b, &format!("{name}.conv2"), ConvSpec::cubic(3, 1, cout, cout), norm)?,
            projection: if cin != cout {
                Some(ConvLayer::new(b, &format!("{name}.shortcut"), ConvSpec::cubic(1, 1, cin, cout), true)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        add(ctx.tape, y, shortcut)
    }
}

/// Dilation rates of the three atrous-path stages, applied in sequence.
pub const ARP_STAGES: [(usize, usize); 3] = [(1, 1), (3, 3), (3, 9)];

/// `y = F(x) + x` with `F` the sequence 1×1×1 → 3×3×3 (r=3) → 3×3×3 (r=9),
/// each stage a conv-norm-relu at constant width.
#[derive(Debug, Clone)]
pub struct AtrousResidualPath {
    pub stages: Vec<ConvNormRelu>,
}

impl AtrousResidualPath {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, norm: NormSettings) -> Result<Self> {
        let stages = ARP_STAGES
            .iter()
            .enumerate()
            .map(|(i, &(k, r))| {
                ConvNormRelu::new(b, &format!("{name}.stage{i}"), ConvSpec::cubic(k, r, channels, channels), norm)
            })
            .collect::<Result<_>>()?;
        Ok(AtrousResidualPath { stages })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = x;
        for stage in &self.stages {
            y = stage.forward(ctx, y)?;
        }
        add(ctx.tape, y, x)
    }
}

/// Intermediate results of [`AttentionModule3D::forward_maps`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    /// Channel gate `M_c`, shape `(N, 1, 1, 1, C)`.
    pub channel: Var,
    /// `F′ = M_c ⊙ F`.
    pub channel_gated: Var,
    /// Volume gate `M_v`, shape `(N, V, H, W, 1)`.
    pub volume: Var,
    /// `F″ = M_v ⊙ F′`.
    pub output: Var,
}

/// Channel attention followed by volume attention.
///
/// `M_c = σ(MLP(avgpool(F)) + MLP(maxpool(F)))` with one shared bias-free
/// MLP of hidden width C/8; `M_v = σ(conv7([avg_c(F′); max_c(F′)]))`.
#[derive(Debug, Clone)]
pub struct AttentionModule3D {
    pub channels: usize,
    pub mlp_in: ParamId,
    pub mlp_out: ParamId,
    pub volume_conv: ConvLayer,
}

impl AttentionModule3D {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let hidden = ops::mlp_hidden(channels)?;
        let w0 = ConvSpec::cubic(1, 1, channels, hidden);
        let w1 = ConvSpec::cubic(1, 1, hidden, channels);
        Ok(AttentionModule3D {
            channels,
            mlp_in: b.conv_weight(format!("{name}.mlp0"), &w0)?,
            mlp_out: b.conv_weight(format!("{name}.mlp1"), &w1)?,
            volume_conv: ConvLayer::new(
                b,
                &format!("{name}.volume"),
                ConvSpec::cubic(ATTENTION_KERNEL, 1, 2, 1),
                true,
            )?,
        })
    }

    pub fn forward_maps(&self, ctx: &mut Ctx, f: Var) -> Result<AttentionMaps> {
        let w0 = ctx.param(self.mlp_in);
        let w1 = ctx.param(self.mlp_out);
        let tape = &mut *ctx.tape;
        let avg = pool3d(tape, f, PoolMode::Avg, PoolScope::GlobalSpatial)?;
        let max = pool3d(tape, f, PoolMode::Max, PoolScope::GlobalSpatial)?;
        let a = shared_mlp(tape, avg, w0, w1)?;
        let m = shared_mlp(tape, max, w0, w1)?;
        let logits = add(tape, a, m)?;
        let channel = sigmoid(tape, logits)?;
        let channel_gated = mul(tape, f, channel)?;

        let avg_c = pool3d(tape, channel_gated, PoolMode::Avg, PoolScope::GlobalChannel)?;
        let max_c = pool3d(tape, channel_gated, PoolMode::Max, PoolScope::GlobalChannel)?;
        let pooled = concat_channels(tape, avg_c, max_c)?;
        let logits = self.volume_conv.forward(ctx, pooled)?;
        let volume = sigmoid(ctx.tape, logits)?;
        let output = mul(ctx.tape, channel_gated, volume)?;
        Ok(AttentionMaps {
            channel,
            channel_gated,
            volume,
            output,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        Ok(self.forward_maps(ctx, f)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_params, Coords};
    use crate::ops::weighted_sum;
    use crate::tensor::Shape;

    const P: Precision = Precision::F64;
    const LN: NormSettings = NormSettings {
        kind: NormKind::Layer,
        eps: 1e-5,
        momentum: 0.99,
    };

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, P, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn zero_all(store: &mut ParamStore, except: &[&str]) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if p.trainable && !except.iter().any(|s| p.name.ends_with(s)) {
                let z = p.value.zeros_like();
                store.set_value(id, z).unwrap();
            }
        }
    }

    fn run<T>(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx, Var) -> Result<T>) -> (Tape, Var, T) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let mut ctx = Ctx::new(&mut tape, store, true);
        let out = f(&mut ctx, xv).unwrap();
        (tape, xv, out)
    }

    #[test]
    fn arp_with_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        let arp = AtrousResidualPath::new(&mut ParamBuilder::new(&mut store, 1, P), "arp", 4, LN).unwrap();
        zero_all(&mut store, &["gamma"]);
        let x = random(&[1, 8, 8, 8, 4], 2);
        let (tape, _, y) = run(&store, &x, |ctx, xv| arp.forward(ctx, xv));
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn arp_preserves_shape() {
        let mut store = ParamStore::new();
        let arp = AtrousResidualPath::new(&mut ParamBuilder::new(&mut store, 3, P), "arp", 4, LN).unwrap();
        let x = random(&[1, 8, 8, 8, 4], 4);
        let (tape, _, y) = run(&store, &x, |ctx, xv| arp.forward(ctx, xv));
        assert_eq!(tape.value(y).dims(), x.dims());
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dilation_nine_stage_reaches_offsets_nine_apart() {
        let mut store = ParamStore::new();
        let arp = AtrousResidualPath::new(&mut ParamBuilder::new(&mut store, 5, P), "arp", 1, LN).unwrap();
        let conv = &arp.stages[2].conv;
        assert_eq!((conv.spec.kernel, conv.spec.dilation), ([3, 3, 3], 9));
        assert_eq!(conv.spec.effective_extent(0), 19);

        let centre = 9;
        let spike = Tensor::from_fn(&[1, 19, 19, 19, 1], P, |i| if i == (centre * 19 + centre) * 19 + centre { 1.0 } else { 0.0 })
            .unwrap();
        let reached = |w: &Tensor| -> Vec<[usize; 3]> {
            let y = ops::conv3d_forward(&spike, w, None, &conv.spec).unwrap();
            (0..y.len())
                .filter(|&i| y.data()[i] != 0.0)
                .map(|i| {
                    let c = y.shape().unravel(i);
                    [c[1], c[2], c[3]]
                })
                .collect()
        };
        // Every tap on: exactly the 27 voxels at offsets {−9, 0, 9} per axis.
        let all = reached(&Tensor::ones(&conv.spec.weight_dims(), P).unwrap());
        assert_eq!(all.len(), 27);
        assert!(all.iter().all(|p| p.iter().all(|&c| [0, 9, 18].contains(&c))));
        // A single tap (a, b, c) moves the spike by −9·(tap − 1) per axis.
        for tap in 0..27 {
            let w = Tensor::from_fn(&conv.spec.weight_dims(), P, |i| if i == tap { 1.0 } else { 0.0 }).unwrap();
            let t = [tap / 9, (tap / 3) % 3, tap % 3];
            let want = t.map(|k| (centre as isize - 9 * (k as isize - 1)) as usize);
            assert_eq!(reached(&w), vec![want]);
        }
    }

    #[test]
    fn residual_block_identity_and_projection() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 6, P);
        let same = ResidualConvBlock::new(&mut b, "same", 4, 4, LN).unwrap();
        let wide = ResidualConvBlock::new(&mut b, "wide", 4, 8, LN).unwrap();
        assert!(same.projection.is_none());
        assert!(wide.projection.is_some());
        let x = random(&[1, 4, 4, 4, 4], 7);
        let (tape, _, y) = run(&store, &x, |ctx, xv| wide.forward(ctx, xv));
        assert_eq!(tape.value(y).dims(), &[1, 4, 4, 4, 8]);

        zero_all(&mut store, &["gamma"]);
        let probe = random(&[1, 4, 4, 4, 4], 8);
        let (tape, xv, y) = run(&store, &x, |ctx, xv| {
            let y = same.forward(ctx, xv)?;
            let s = weighted_sum(ctx.tape, y, &probe)?;
            Ok((y, s))
        });
        assert_eq!(tape.value(y.0), &x);
        // With zero weights the Jacobian is the identity: J·probe == probe.
        let grads = tape.backward(y.1).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &probe);
    }

    #[test]
    fn attention_of_zero_with_zero_weights() {
        let mut store = ParamStore::new();
        let att = AttentionModule3D::new(&mut ParamBuilder::new(&mut store, 9, P), "att", 8).unwrap();
        zero_all(&mut store, &[]);
        let x = Tensor::zeros(&[1, 4, 4, 4, 8], P).unwrap();
        let (tape, _, maps) = run(&store, &x, |ctx, xv| att.forward_maps(ctx, xv));
        let half = |dims: &[usize]| Tensor::full(dims, 0.5, P).unwrap();
        assert_eq!(tape.value(maps.channel), &half(&[1, 1, 1, 1, 8]));
        assert_eq!(tape.value(maps.volume), &half(&[1, 4, 4, 4, 1]));
        assert_eq!(tape.value(maps.channel_gated).max_abs(), 0.0);
        assert_eq!(tape.value(maps.output).max_abs(), 0.0);
    }

    #[test]
    fn attention_rejects_indivisible_channels() {
        let mut store = ParamStore::new();
        assert!(AttentionModule3D::new(&mut ParamBuilder::new(&mut store, 1, P), "att", 12).is_err());
    }

    #[test]
    fn attention_gates_are_open_intervals_and_shrink() {
        let mut store = ParamStore::new();
        let att = AttentionModule3D::new(&mut ParamBuilder::new(&mut store, 10, P), "att", 16).unwrap();
        for seed in 0..3 {
            let x = random(&[2, 4, 4, 2, 16], 20 + seed).scale(3.0).unwrap();
            let (tape, _, maps) = run(&store, &x, |ctx, xv| att.forward_maps(ctx, xv));
            assert_eq!(tape.value(maps.channel).dims(), &[2, 1, 1, 1, 16]);
            assert_eq!(tape.value(maps.volume).dims(), &[2, 4, 4, 2, 1]);
            for m in [maps.channel, maps.volume] {
                assert!(tape.value(m).data().iter().all(|&g| g > 0.0 && g < 1.0));
            }
            for (o, i) in tape.value(maps.output).data().iter().zip(x.data()) {
                assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn blocks_pass_gradient_checks() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 11, P);
        let arp = AtrousResidualPath::new(&mut b, "arp", 8, LN).unwrap();
        let att = AttentionModule3D::new(&mut b, "att", 8).unwrap();
        let res = ResidualConvBlock::new(&mut b, "res", 8, 16, LN).unwrap();
        let x = random(&[1, 4, 4, 4, 8], 12);
        let w8 = random(&[1, 4, 4, 4, 8], 13);
        let w16 = random(&[1, 4, 4, 4, 16], 14);
        let coords = Coords::Sample { per_tensor: 12, seed: 15 };
        let check = |label: &str, which: u8| {
            finite_diff_check_params(
                |tape, store| {
                    let xv = tape.input(x.clone());
                    let mut ctx = Ctx::new(tape, store, true);
                    let (y, w) = match which {
                        0 => (arp.forward(&mut ctx, xv)?, &w8),
                        1 => (att.forward(&mut ctx, xv)?, &w8),
                        _ => (res.forward(&mut ctx, xv)?, &w16),
                    };
                    weighted_sum(ctx.tape, y, w)
                },
                &store,
                1e-4,
                coords,
                label,
            )
            .unwrap()
        };
        for (label, which) in [("arp", 0), ("attention", 1), ("residual", 2)] {
            let r = check(label, which);
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn batch_norm_layers_emit_running_updates_only_in_training() {
        let bn = NormSettings {
            kind: NormKind::Batch,
            ..LN
        };
        let mut store = ParamStore::new();
        let block = ConvNormRelu::new(&mut ParamBuilder::new(&mut store, 16, P), "b", ConvSpec::cubic(3, 1, 2, 8), bn)
            .unwrap();
        assert_eq!(store.len(), 6);
        assert_eq!(store.trainable_count(), 3 * 3 * 3 * 2 * 8 + 8 + 16);
        let x = random(&[2, 2, 2, 2, 2], 17);
        for training in [true, false] {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let mut ctx = Ctx::new(&mut tape, &store, training);
            block.forward(&mut ctx, xv).unwrap();
            let updates = ctx.take_stat_updates();
            assert_eq!(updates.len(), if training { 2 } else { 0 });
            for (id, t) in updates {
                assert_eq!(t.shape(), &Shape::new(vec![8]).unwrap());
                assert!(!store.get(id).trainable);
            }
        }
    }
}
