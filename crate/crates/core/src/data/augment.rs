//! The eight augmentation mechanisms. Each acts in the H–W plane with one
//! set of random parameters shared by every slice of a sample, and moves the
//! image and the mask together.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Erosion,
    Dilation,
    HorizontalFlip,
    VerticalFlip,
    Rotate90,
    Elastic,
    GridDistortion,
    OpticalDistortion,
}

impl Mechanism {
    pub const ALL: [Mechanism; 8] = [
        Mechanism::Erosion,
        Mechanism::Dilation,
        Mechanism::HorizontalFlip,
        Mechanism::VerticalFlip,
        Mechanism::Rotate90,
        Mechanism::Elastic,
        Mechanism::GridDistortion,
        Mechanism::OpticalDistortion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Erosion => "erosion",
            Mechanism::Dilation => "dilation",
            Mechanism::HorizontalFlip => "hflip",
            Mechanism::VerticalFlip => "vflip",
            Mechanism::Rotate90 => "rot90",
            Mechanism::Elastic => "elastic",
            Mechanism::GridDistortion => "grid",
            Mechanism::OpticalDistortion => "optical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPlan {
    pub erosion: f64,
    pub dilation: f64,
    pub hflip: f64,
    pub vflip: f64,
    pub rot90: f64,
    pub elastic: f64,
    pub grid: f64,
    pub optical: f64,
    pub seed: u64,
    /// Apply erosion and dilation to the image as well as the mask.
    pub morphology_on_image: bool,
    /// Peak displacement of the elastic field, in voxels.
    pub elastic_alpha: f64,
    /// Gaussian smoothing of the elastic field, in voxels.
    pub elastic_sigma: f64,
    pub grid_cells: usize,
    /// Each grid step is scaled by a factor in `1 ± grid_limit`.
    pub grid_limit: f64,
    /// Radial coefficient `k` of `r' = r·(1 + k·r²)` is drawn from `±optical_limit`.
    pub optical_limit: f64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            erosion: 0.05,
            dilation: 0.05,
            hflip: 0.05,
            vflip: 0.05,
            rot90: 0.05,
            elastic: 0.05,
            grid: 0.05,
            optical: 0.05,
            seed: 0,
            morphology_on_image: true,
            elastic_alpha: 2.0,
            elastic_sigma: 3.0,
            grid_cells: 4,
            grid_limit: 0.3,
            optical_limit: 0.3,
        }
    }
}

impl AugmentationPlan {
    /// A plan that selects nothing.
    pub fn none() -> Self {
        let mut p = AugmentationPlan::default();
        for m in Mechanism::ALL {
            *p.fraction_mut(m) = 0.0;
        }
        p
    }

    pub fn fraction(&self, m: Mechanism) -> f64 {
        match m {
            Mechanism::Erosion => self.erosion,
            Mechanism::Dilation => self.dilation,
            Mechanism::HorizontalFlip => self.hflip,
            Mechanism::VerticalFlip => self.vflip,
            Mechanism::Rotate90 => self.rot90,
            Mechanism::Elastic => self.elastic,
            Mechanism::GridDistortion => self.grid,
            Mechanism::OpticalDistortion => self.optical,
        }
    }

    pub fn fraction_mut(&mut self, m: Mechanism) -> &mut f64 {
        match m {
            Mechanism::Erosion => &mut self.erosion,
            Mechanism::Dilation => &mut self.dilation,
            Mechanism::HorizontalFlip => &mut self.hflip,
            Mechanism::VerticalFlip => &mut self.vflip,
            Mechanism::Rotate90 => &mut self.rot90,
            Mechanism::Elastic => &mut self.elastic,
            Mechanism::GridDistortion => &mut self.grid,
            Mechanism::OpticalDistortion => &mut self.optical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Mechanism::ALL {
            let f = self.fraction(m);
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(
                    format!("augmentation.{}", m.name()),
                    format!("fraction must lie in [0, 1], got {f}"),
                ));
            }
        }
        let positive = [
            ("elastic_alpha", self.elastic_alpha >= 0.0),
            ("elastic_sigma", self.elastic_sigma > 0.0),
            ("grid_cells", self.grid_cells >= 1),
            ("grid_limit", (0.0..1.0).contains(&self.grid_limit)),
            ("optical_limit", (0.0..1.0).contains(&self.optical_limit)),
        ];
        for (field, ok) in positive {
            if !ok {
                return Err(Error::config(format!("augmentation.{field}"), "out of range"));
            }
        }
        Ok(())
    }

    /// `⌈fraction·n⌉`, treating products within rounding of an integer as
    /// that integer.
    pub fn selection_size(&self, m: Mechanism, n: usize) -> usize {
        let x = self.fraction(m) * n as f64;
        let r = x.round();
        let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
        (k as usize).min(n)
    }
}

/// SplitMix64 over the parts, for per-mechanism and per-sample seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MechanismReport {
    pub mechanism: Mechanism,
    pub selected: Vec<usize>,
    /// Copies whose non-empty mask became empty.
    pub emptied: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub samples: Vec<VolumeSample>,
    pub report: Vec<MechanismReport>,
}

/// Originals followed, per mechanism in [`Mechanism::ALL`] order, by the
/// transformed copies of a seeded selection of `⌈fraction·N⌉` originals.
pub fn augment(samples: &[VolumeSample], plan: &AugmentationPlan) -> Result<Augmented> {
    plan.validate()?;
    let n = samples.len();
    let mut out = samples.to_vec();
    let mut report = Vec::new();
    for (mi, m) in Mechanism::ALL.into_iter().enumerate() {
        let k = plan.selection_size(m, n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[plan.seed, mi as u64]));
        let mut selected = index::sample(&mut rng, n, k).into_vec();
        selected.sort_unstable();
        let mut emptied = 0;
        for &i in &selected {
            let src = &samples[i];
            let seed = derive_seed(&[plan.seed, mi as u64, i as u64]);
            let copy = apply(m, src, plan, seed)?;
            if src.mask.sum_all() > 0.0 && copy.mask.sum_all() == 0.0 {
                emptied += 1;
            }
            out.push(copy);
        }
        report.push(MechanismReport {
            mechanism: m,
            selected,
            emptied,
        });
    }
    Ok(Augmented { samples: out, report })
}

/// Applies one mechanism to a sample with parameters drawn from `seed`.
pub fn apply(m: Mechanism, s: &VolumeSample, plan: &AugmentationPlan, seed: u64) -> Result<VolumeSample> {
    let [_, h, w] = s.extents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, mask) = match m {
        Mechanism::Erosion | Mechanism::Dilation => {
            let op = if m == Mechanism::Erosion { Morph::Erode } else { Morph::Dilate };
            let image = if plan.morphology_on_image { morphology(&s.image, op)? } else { s.image.clone() };
            (image, morphology(&s.mask, op)?)
        }
        Mechanism::HorizontalFlip => both(s, |t| permute(t, |y, x| (y, w - 1 - x))),
        Mechanism::VerticalFlip => both(s, |t| permute(t, |y, x| (h - 1 - y, x))),
        Mechanism::Rotate90 => {
            let k = if h == w { rng.random_range(1..4) } else { 2 };
            both(s, |t| rot90(t, k))
        }
        Mechanism::Elastic => {
            let field = elastic_field(h, w, plan.elastic_alpha, plan.elastic_sigma, &mut rng);
            resample_pair(s, |y, x| {
                let (dy, dx) = field[y * w + x];
                (y as f64 + dy, x as f64 + dx)
            })?
        }
        Mechanism::GridDistortion => {
            let ys = grid_axis(h, plan.grid_cells, plan.grid_limit, &mut rng);
            let xs = grid_axis(w, plan.grid_cells, plan.grid_limit, &mut rng);
            resample_pair(s, |y, x| (ys[y], xs[x]))?
        }
        Mechanism::OpticalDistortion => {
            let k = rng.random_range(-plan.optical_limit..=plan.optical_limit);
            let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
            let r = cy.max(cx).max(1.0);
            resample_pair(s, |y, x| {
                let (dy, dx) = ((y as f64 - cy) / r, (x as f64 - cx) / r);
                let f = 1.0 + k * (dy * dy + dx * dx);
                (cy + dy * f * r, cx + dx * f * r)
            })?
        }
    };
    Ok(VolumeSample {
        id: format!("{}+{}", s.id, m.name()),
        image,
        mask,
        slices: s.slices,
    })
}

fn both(s: &VolumeSample, f: impl Fn(&Tensor) -> Result<Tensor>) -> (Tensor, Tensor) {
    (
        f(&s.image).expect("index permutation of a valid volume"),
        f(&s.mask).expect("index permutation of a valid volume"),
    )
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let d = t.dims();
    (d[0], d[1], d[2])
}

/// `out[z, y, x] = in[z, src(y, x)]` for an in-plane index map onto `(H', W')`.
fn gather(t: &Tensor, out_hw: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (v, h, w) = dims(t);
    let (oh, ow) = out_hw;
    let d = t.data();
    let mut out = Vec::with_capacity(v * oh * ow);
    for z in 0..v {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                out.push(d[(z * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_vec(&[v, oh, ow, 1], out, t.precision())
}

fn permute(t: &Tensor, src: impl Fn(usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (_, h, w) = dims(t);
    gather(t, (h, w), src)
}

/// Rotation by `k` quarter turns in the H–W plane (counter-clockwise for
/// `y` pointing down). Odd `k` needs a square plane.
pub fn rot90(t: &Tensor, k: usize) -> Result<Tensor> {
    let mut cur = t.clone();
    for _ in 0..k % 4 {
        let (_, h, w) = dims(&cur);
        // out has extents (w, h): out[y][x] = in[x][w − 1 − y]
        cur = gather(&cur, (w, h), |y, x| (x, w - 1 - y))?;
    }
    Ok(cur)
}

pub fn hflip(t: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(t);
    permute(t, |y, x| (y, w - 1 - x))
}

pub fn vflip(t: &Tensor) -> Result<Tensor> {
    let (_, h, _) = dims(t);
    permute(t, |y, x| (h - 1 - y, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Morph {
    Erode,
    Dilate,
}

/// Per-slice grey-scale erosion or dilation with a 3×3 cross, taking the
/// min or max over the in-bounds part of the neighbourhood.
pub fn morphology(t: &Tensor, op: Morph) -> Result<Tensor> {
    let (v, h, w) = dims(t);
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for z in 0..v {
        for y in 0..h {
            for x in 0..w {
                let mut acc = d[(z * h + y) * w + x];
                let neighbours = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w {
                        let n = d[(z * h + ny) * w + nx];
                        acc = match op {
                            Morph::Erode => acc.min(n),
                            Morph::Dilate => acc.max(n),
                        };
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_vec(&[v, h, w, 1], out, t.precision())
}

/// Resamples image (bilinear) and mask (nearest) at the source coordinates
/// `src(y, x)`, clamped to the plane.
fn resample_pair(s: &VolumeSample, src: impl Fn(usize, usize) -> (f64, f64)) -> Result<(Tensor, Tensor)> {
    let (v, h, w) = dims(&s.image);
    let clamp = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
    let coords: Vec<(f64, f64)> = (0..h * w).map(|i| {
        let (y, x) = src(i / w, i % w);
        (clamp(y, h), clamp(x, w))
    }).collect();
    let (img, msk) = (s.image.data(), s.mask.data());
    let mut image = Vec::with_capacity(v * h * w);
    let mut mask = Vec::with_capacity(v * h * w);
    for z in 0..v {
        let at = |yy: usize, xx: usize| (z * h + yy) * w + xx;
        for &(y, x) in &coords {
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = (1.0 - fx) * img[at(y0, x0)] + fx * img[at(y0, x1)];
            let bottom = (1.0 - fx) * img[at(y1, x0)] + fx * img[at(y1, x1)];
            image.push(((1.0 - fy) * top + fy * bottom).clamp(0.0, 1.0));
            mask.push(msk[at(y.round() as usize, x.round() as usize)]);
        }
    }
    Ok((
        Tensor::from_vec(&[v, h, w, 1], image, s.image.precision())?,
        Tensor::from_vec(&[v, h, w, 1], mask, s.mask.precision())?,
    ))
}

fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let off = j as isize - radius;
                    let (yy, xx) = if along_x {
                        (y as isize, (x as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += k * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Smoothed random displacement `(dy, dx)` per in-plane position, scaled so
/// the largest component has magnitude `alpha`.
fn elastic_field(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut noise = || (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (ny, nx) = (noise(), noise());
    let (dy, dx) = (gaussian_blur(&ny, h, w, sigma), gaussian_blur(&nx, h, w, sigma));
    let peak = dy.iter().chain(&dx).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { alpha / peak } else { 0.0 };
    dy.into_iter().zip(dx).map(|(a, b)| (a * scale, b * scale)).collect()
}

/// Source coordinate of each output position along one axis: `cells` equal
/// cells whose source widths are scaled by `1 ± limit`, renormalized so
/// both ends stay fixed.
fn grid_axis(n: usize, cells: usize, limit: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let span = (n - 1) as f64;
    let steps: Vec<f64> = (0..cells).map(|_| 1.0 + rng.random_range(-limit..=limit)).collect();
    let total: f64 = steps.iter().sum();
    let mut nodes = vec![0.0];
    for s in &steps {
        nodes.push(nodes.last().unwrap() + s / total * span);
    }
    let cell = span / cells as f64;
    (0..n)
        .map(|i| {
            let pos = i as f64 / cell;
            let c = (pos.floor() as usize).min(cells - 1);
            let frac = pos - c as f64;
            nodes[c] + frac * (nodes[c + 1] - nodes[c])
        })
        .collect()
}
