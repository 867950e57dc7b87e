//! Volumes, windowing, augmentation and the synthetic dataset.

pub mod augment;
pub mod synth;
pub mod volume;
pub mod window;

pub use augment::{augment, AugmentationPlan, Augmented, Mechanism};
pub use synth::synth_dataset;
pub use volume::{
    image_stem, load_dataset, load_image, load_mask, load_volume, mask_stem, save_mask, save_volume, VolumeSample,
};
pub use window::{extract_windows, WindowingSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Splits whole volumes into training and held-out sets after a seeded
/// shuffle. The training share is `⌈train_fraction·n⌉`, but at least one
/// volume is held out whenever `n >= 2` and `train_fraction < 1`.
pub fn split_dataset(
    mut samples: Vec<VolumeSample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config("train_fraction", format!("must lie in [0, 1], got {train_fraction}")));
    }
    let n = samples.len();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = ((train_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if n >= 2 && train_fraction < 1.0 {
        n_train = n_train.min(n - 1);
    }
    let held_out = samples.split_off(n_train.min(n));
    Ok((samples, held_out))
}

/// Stacks images and masks of equally shaped samples into `(N, V, H, W, 1)`.
pub fn batch(samples: &[&VolumeSample], precision: Precision) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let [v, h, w] = first.extents();
    let mut image = Vec::with_capacity(samples.len() * first.image.len());
    let mut mask = Vec::with_capacity(image.capacity());
    for s in samples {
        if s.extents() != [v, h, w] {
            return Err(Error::InvalidShape(format!(
                "volume `{}` has extents {:?}, batch expects {:?}",
                s.id,
                s.extents(),
                [v, h, w]
            )));
        }
        image.extend_from_slice(s.image.data());
        mask.extend_from_slice(s.mask.data());
    }
    let dims = [samples.len(), v, h, w, 1];
    Ok((Tensor::from_vec(&dims, image, precision)?, Tensor::from_vec(&dims, mask, precision)?))
}
