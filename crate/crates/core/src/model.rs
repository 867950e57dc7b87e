//! The assembled encoder–decoder network.
//!
//! With `L = levels` and widths `w_ℓ = base · 2^ℓ`:
//!
//! * encoder level `ℓ < L`: residual block to `w_ℓ`, an atrous residual path
//!   on the result (the skip), then 2×2×2 max-pooling;
//! * bottleneck at level `L`: one residual block to `w_L`;
//! * decoder level `ℓ` (deepest first): nearest ×2 upsampling, concatenation
//!   `[up; skip_ℓ]` (`3·w_ℓ` channels), two 3×3×3 conv-norm-relu stages to
//!   `w_ℓ`, then the attention module;
//! * head: 1×1×1 convolution to one channel and a sigmoid.
//!
//! There are `L` downsamplings, so every input extent must be divisible by
//! `2^L`.

use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::blocks::{
    AtrousResidualPath, AttentionModule3D, ConvLayer, ConvNormRelu, Ctx, NormKind, NormSettings, ParamBuilder,
    ResidualConvBlock, ATTENTION_KERNEL,
};
use crate::error::{Error, Result};
use crate::ops::{concat_channels, pool3d, sigmoid, upsample3d, ConvSpec, PoolMode, PoolScope, MLP_REDUCTION};
use crate::tensor::{Precision, Tensor};

const MAX_LEVELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Input extents `(V, H, W)`.
    pub input_shape: [usize; 3],
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            base_channels: 16,
            input_shape: [16, 32, 32],
            norm_kind: NormKind::Layer,
            norm_eps: 1e-5,
            bn_momentum: 0.99,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::config(
                "levels",
                format!("must be between 2 and {MAX_LEVELS}, got {}", self.levels),
            ));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(MLP_REDUCTION) {
            return Err(Error::config(
                "base_channels",
                format!(
                    "must be a positive multiple of {MLP_REDUCTION} (attention reduction ratio), got {}",
                    self.base_channels
                ),
            ));
        }
        let period = 1usize << self.levels;
        for (axis, &extent) in ["V", "H", "W"].iter().zip(&self.input_shape) {
            if extent == 0 || extent % period != 0 {
                return Err(Error::config(
                    "input_shape",
                    format!(
                        "{axis} = {extent} is not divisible by 2^levels = {period} ({} downsamplings)",
                        self.levels
                    ),
                ));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Channel width at each level, bottleneck last.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels).map(|l| self.base_channels << l).collect()
    }

    fn norm_settings(&self) -> NormSettings {
        NormSettings {
            kind: self.norm_kind,
            eps: self.norm_eps,
            momentum: self.bn_momentum,
        }
    }

    /// Closed-form trainable parameter count per block, in build order.
    pub fn census(&self) -> Vec<(String, usize)> {
        let conv = |k: usize, ci: usize, co: usize| k * k * k * ci * co + co;
        let cnr = |k, ci, co| conv(k, ci, co) + 2 * co;
        let res = |ci, co| cnr(3, ci, co) + cnr(3, co, co) + if ci != co { conv(1, ci, co) } else { 0 };
        let arp = |c| cnr(1, c, c) + 2 * cnr(3, c, c);
        let att = |c: usize| 2 * c * (c / MLP_REDUCTION) + conv(ATTENTION_KERNEL, 2, 1);
        let dec = |c| cnr(3, 3 * c, c) + cnr(3, c, c) + att(c);

        let w = self.widths();
        let l = self.levels;
        let mut out = Vec::new();
        for i in 0..l {
            let cin = if i == 0 { 1 } else { w[i - 1] };
            out.push((format!("encoder{i}"), res(cin, w[i])));
            out.push((format!("skip{i}"), arp(w[i])));
        }
        out.push(("bottleneck".into(), res(w[l - 1], w[l])));
        for i in (0..l).rev() {
            out.push((format!("decoder{i}"), dec(w[i])));
        }
        out.push(("head".into(), conv(1, w[0], 1)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.census().iter().map(|(_, n)| n).sum()
    }

    /// Names of the fields on which `self` and `other` differ.
    pub fn diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut d = Vec::new();
        let mut check = |name, differs: bool| {
            if differs {
                d.push(name);
            }
        };
        check("levels", self.levels != other.levels);
        check("base_channels", self.base_channels != other.base_channels);
        check("input_shape", self.input_shape != other.input_shape);
        check("norm_kind", self.norm_kind != other.norm_kind);
        check("norm_eps", self.norm_eps.to_bits() != other.norm_eps.to_bits());
        check("bn_momentum", self.bn_momentum.to_bits() != other.bn_momentum.to_bits());
        check("precision", self.precision != other.precision);
        check("seed", self.seed != other.seed);
        d
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub conv1: ConvNormRelu,
    pub conv2: ConvNormRelu,
    pub attention: AttentionModule3D,
}

#[derive(Debug, Clone)]
pub struct AtrousResUNet {
    config: ModelConfig,
    store: ParamStore,
    pub encoders: Vec<ResidualConvBlock>,
    pub skips: Vec<AtrousResidualPath>,
    pub bottleneck: ResidualConvBlock,
    /// Indexed by level; level 0 is the shallowest.
    pub decoders: Vec<DecoderLevel>,
    pub head: ConvLayer,
}

impl AtrousResUNet {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, config.seed, config.precision);
        let norm = config.norm_settings();
        let w = config.widths();
        let l = config.levels;

        let mut encoders = Vec::with_capacity(l);
        let mut skips = Vec::with_capacity(l);
        for i in 0..l {
            let cin = if i == 0 { 1 } else { w[i - 1] };
            encoders.push(ResidualConvBlock::new(&mut b, &format!("encoder{i}"), cin, w[i], norm)?);
            skips.push(AtrousResidualPath::new(&mut b, &format!("skip{i}"), w[i], norm)?);
        }
        let bottleneck = ResidualConvBlock::new(&mut b, "bottleneck", w[l - 1], w[l], norm)?;
        let mut decoders = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let name = format!("decoder{i}");
            decoders.push(DecoderLevel {
                conv1: ConvNormRelu::new(&mut b, &format!("{name}.conv1"), ConvSpec::cubic(3, 1, 3 * w[i], w[i]), norm)?,
                conv2: ConvNormRelu::new(&mut b, &format!("{name}.conv2"), ConvSpec::cubic(3, 1, w[i], w[i]), norm)?,
                attention: AttentionModule3D::new(&mut b, &format!("{name}.attention"), w[i])?,
            });
        }
        decoders.reverse();
        let head = ConvLayer::new(&mut b, "head", ConvSpec::cubic(1, 1, w[0], 1), true)?;
        Ok(AtrousResUNet {
            config: config.clone(),
            store,
            encoders,
            skips,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable parameter count per block, read from the built store.
    pub fn census(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            let block = p.name.split('.').next().unwrap_or_default();
            match out.last_mut() {
                Some((name, n)) if name == block => *n += p.value.len(),
                _ => out.push((block.to_string(), p.value.len())),
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, v, h, w, c] = x.shape().as_nvhwc()?;
        if [v, h, w] != self.config.input_shape || c != 1 {
            let [ev, eh, ew] = self.config.input_shape;
            return Err(Error::InvalidShape(format!(
                "model expects input (N×{ev}×{eh}×{ew}×1), got {}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Per-voxel foreground probability for a `(N, V, H, W, 1)` input.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(ctx.value(x))?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.levels);
        for (enc, skip) in self.encoders.iter().zip(&self.skips) {
            h = enc.forward(ctx, h)?;
            skips.push(skip.forward(ctx, h)?);
            h = pool3d(ctx.tape, h, PoolMode::Max, PoolScope::Window2)?;
        }
        h = self.bottleneck.forward(ctx, h)?;
        for (dec, skip) in self.decoders.iter().zip(skips).rev() {
            let up = upsample3d(ctx.tape, h)?;
            let joined = concat_channels(ctx.tape, up, skip)?;
            h = dec.conv1.forward(ctx, joined)?;
            h = dec.conv2.forward(ctx, h)?;
            h = dec.attention.forward(ctx, h)?;
        }
        let logits = self.head.forward(ctx, h)?;
        sigmoid(ctx.tape, logits)
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_precision(self.config.precision)?);
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let y = self.forward(&mut ctx, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            parameters: self.store.iter().map(|(_, p)| p.name.clone()).collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            p.value.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    /// Rebuilds the model for `config` and fills it from `bytes`. The seed is
    /// not compared: it only determines the initialization being replaced.
    pub fn load_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let manifest = read_manifest(&mut r)?;
        let mismatched: Vec<_> = manifest
            .config
            .diff(config)
            .into_iter()
            .filter(|&f| f != "seed")
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for a different configuration (differs in: {})",
                mismatched.join(", ")
            )));
        }
        let mut model = AtrousResUNet::build(config)?;
        model.config.seed = manifest.config.seed;
        let mut seen = vec![false; model.store.len()];
        for name in &manifest.parameters {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!("parameter `{name}` appears twice")));
            }
            let value = Tensor::read_from(&mut r)
                .map_err(|e| Error::Checkpoint(format!("reading `{name}`: {e}")))?;
            if value.precision() != config.precision {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is stored in {}-bit precision",
                    value.precision().bits()
                )));
            }
            model
                .store
                .set_value(id, value)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &model.store.iter().nth(missing).expect("index in range").1.name;
            return Err(Error::Checkpoint(format!("parameter `{name}` is missing")));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(model)
    }

    /// Loads a checkpoint using the configuration recorded inside it.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let config = checkpoint_config(bytes)?;
        Self::load_checkpoint(bytes, &config)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ARUNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    parameters: Vec<String>,
}

fn read_manifest(r: &mut impl Read) -> Result<Manifest> {
    let truncated = |what: &str| Error::Checkpoint(format!("truncated stream while reading {what}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| truncated("the header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| truncated("the header"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| truncated("the header"))?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
    let mut json = Vec::new();
    r.take(len as u64).read_to_end(&mut json)?;
    if json.len() != len {
        return Err(truncated("the manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Checkpoint("manifest and header versions disagree".into()));
    }
    Ok(manifest)
}

/// The model configuration echoed in a checkpoint's manifest.
pub fn checkpoint_config(bytes: &[u8]) -> Result<ModelConfig> {
    Ok(read_manifest(&mut Cursor::new(bytes))?.config)
}

/// Writes a checkpoint to `path`.
pub fn write_checkpoint(model: &AtrousResUNet, path: &std::path::Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&model.save_checkpoint())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(levels: usize, shape: [usize; 3]) -> ModelConfig {
        ModelConfig {
            levels,
            base_channels: 8,
            input_shape: shape,
            precision: Precision::F64,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn two_levels_build_with_two_skips() {
        let m = AtrousResUNet::build(&small(2, [8, 8, 8])).unwrap();
        assert_eq!(m.skips.len(), 2);
        assert_eq!(m.decoders.len(), 2);
        assert_eq!(m.census(), m.config().census());
        assert_eq!(m.store().trainable_count(), m.config().parameter_count());
    }

    #[test]
    fn divisibility_rules() {
        let mut c = ModelConfig {
            input_shape: [16, 32, 32],
            ..ModelConfig::default()
        };
        c.validate().unwrap();
        c.input_shape = [12, 32, 32];
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("input_shape") && err.contains("V = 12"), "{err}");
        c.input_shape = [16, 32, 32];
        c.base_channels = 12;
        assert!(c.validate().unwrap_err().to_string().contains("base_channels"));
        c.base_channels = 16;
        c.levels = 1;
        assert!(c.validate().unwrap_err().to_string().contains("levels"));
    }

    #[test]
    fn census_closed_form_for_default() {
        // encoder0 1→16 with projection, counted by hand
        let c = ModelConfig::default();
        let census = c.census();
        assert_eq!(census[0], ("encoder0".to_string(), (27 * 16 + 16 + 32) + (27 * 256 + 16 + 32) + (16 + 16)));
        assert_eq!(census.len(), 2 * 4 + 1 + 4 + 1);
        let m = AtrousResUNet::build(&c).unwrap();
        assert_eq!(m.census(), census);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = AtrousResUNet::build(&small(2, [8, 8, 8])).unwrap();
        let b = AtrousResUNet::build(&small(2, [8, 8, 8])).unwrap();
        assert_eq!(a.store(), b.store());
        let mut other = small(2, [8, 8, 8]);
        other.seed = 8;
        assert_ne!(a.store(), AtrousResUNet::build(&other).unwrap().store());
    }

    #[test]
    fn forward_shape_and_range() {
        let m = AtrousResUNet::build(&small(3, [8, 16, 16])).unwrap();
        let x = Tensor::from_fn(&[1, 8, 16, 16, 1], Precision::F64, |i| ((i * 37) % 101) as f64 / 100.0).unwrap();
        let y = m.infer(&x).unwrap();
        assert_eq!(y.dims(), &[1, 8, 16, 16, 1]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let wrong = Tensor::zeros(&[1, 8, 8, 16, 1], Precision::F64).unwrap();
        assert!(m.infer(&wrong).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let cfg = small(2, [8, 8, 8]);
        let mut m = AtrousResUNet::build(&cfg).unwrap();
        // perturb so the loaded values are not just the seeded init
        let id = m.store().find("head.bias").unwrap();
        m.store_mut().set_value(id, Tensor::full(&[1], 0.25, Precision::F64).unwrap()).unwrap();
        let bytes = m.save_checkpoint();
        let back = AtrousResUNet::load_checkpoint(&bytes, &cfg).unwrap();
        assert_eq!(back.store(), m.store());
        let x = Tensor::from_fn(&[1, 8, 8, 8, 1], Precision::F64, |i| (i as f64 * 0.1).sin().abs()).unwrap();
        assert_eq!(back.infer(&x).unwrap(), m.infer(&x).unwrap());
        assert_eq!(checkpoint_config(&bytes).unwrap(), cfg);

        let mut wide = cfg.clone();
        wide.base_channels = 16;
        let err = AtrousResUNet::load_checkpoint(&bytes, &wide).unwrap_err().to_string();
        assert!(err.contains("base_channels"), "{err}");
        assert!(AtrousResUNet::load_checkpoint(&[], &cfg).is_err());
        assert!(AtrousResUNet::load_checkpoint(&bytes[..bytes.len() - 3], &cfg).is_err());
    }

    #[test]
    fn checkpoint_with_unknown_parameter_rejected() {
        let cfg = small(2, [8, 8, 8]);
        let bytes = AtrousResUNet::build(&cfg).unwrap().save_checkpoint();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
        let renamed = json.replacen("head.bias", "head.bogus", 1);
        let mut forged = bytes[..12].to_vec();
        forged.extend_from_slice(&(renamed.len() as u64).to_le_bytes());
        forged.extend_from_slice(renamed.as_bytes());
        forged.extend_from_slice(&bytes[20 + len..]);
        let err = AtrousResUNet::load_checkpoint(&forged, &cfg).unwrap_err().to_string();
        assert!(err.contains("unknown parameter `head.bogus`"), "{err}");
    }
}
