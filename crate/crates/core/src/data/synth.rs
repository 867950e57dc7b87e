use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::augment::derive_seed;
use crate::data::volume::normalize;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

const AIR: f64 = 0.05;
const TISSUE: f64 = 0.35;
const BONE: f64 = 0.8;
const NOISE_STD: f64 = 0.06;

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// `n` volumes of extents `[V, H, W]`, each a column of ellipsoidal
/// "vertebral bodies" stacked along V inside a larger soft-tissue ellipse,
/// with Gaussian noise. The mask marks the bodies.
pub fn synth_dataset(n: usize, shape: [usize; 3], seed: u64) -> Result<Vec<VolumeSample>> {
    if shape.iter().any(|&e| e < 4) {
        return Err(Error::invalid(format!("synthetic volumes need every extent >= 4, got {shape:?}")));
    }
    (0..n).map(|i| synth_volume(&format!("synth{i:03}"), shape, derive_seed(&[seed, i as u64]))).collect()
}

fn synth_volume(id: &str, [v, h, w]: [usize; 3], seed: u64) -> Result<VolumeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let spacing = rng.random_range(5.0..7.0);
    let mut bodies = Vec::new();
    let mut z = rng.random_range(0.0..spacing);
    let (cy, cx) = (
        hf / 2.0 + rng.random_range(-0.08..0.08) * hf,
        wf / 2.0 + rng.random_range(-0.08..0.08) * wf,
    );
    while z < v as f64 + spacing / 2.0 {
        bodies.push(Ellipsoid {
            centre: [z, cy + rng.random_range(-0.03..0.03) * hf, cx + rng.random_range(-0.03..0.03) * wf],
            radii: [
                spacing * rng.random_range(0.3..0.4),
                hf * rng.random_range(0.14..0.2),
                wf * rng.random_range(0.14..0.2),
            ],
        });
        z += spacing;
    }
    let body = Ellipsoid {
        centre: [v as f64 / 2.0, hf / 2.0, wf / 2.0],
        radii: [f64::INFINITY, hf * 0.45, wf * 0.45],
    };
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut image = Vec::with_capacity(v * h * w);
    let mut mask = Vec::with_capacity(v * h * w);
    for zz in 0..v {
        for yy in 0..h {
            for xx in 0..w {
                let p = [zz as f64 + 0.5, yy as f64 + 0.5, xx as f64 + 0.5];
                let bone = bodies.iter().any(|b| b.contains(p));
                let base = if bone {
                    BONE
                } else if body.contains(p) {
                    TISSUE
                } else {
                    AIR
                };
                image.push(base + noise.sample(&mut rng));
                mask.push(bone as u8 as f64);
            }
        }
    }
    normalize(&mut image);
    let dims = [v, h, w, 1];
    VolumeSample::new(
        id,
        Tensor::from_vec(&dims, image, Precision::F64)?,
        Tensor::from_vec(&dims, mask, Precision::F64)?,
    )
}
