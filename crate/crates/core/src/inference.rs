//! Whole-volume prediction by overlapping windows.

use crate::data::{VolumeSample, WindowingSpec};
use crate::error::{Error, Result};
use crate::model::AtrousResUNet;
use crate::tensor::Tensor;
use crate::train::{binarize, Confusion, MetricReport};

/// Foreground probabilities for a `(D, H, W, 1)` image. Windows of the
/// model's input depth are taken every `stride` slices plus a tail window;
/// each voxel's probability is the mean over the windows covering it.
pub fn predict_probabilities(model: &AtrousResUNet, image: &Tensor, stride: usize) -> Result<Tensor> {
    let [depth, h, w] = model.config().input_shape;
    let dims = image.dims();
    if dims.len() != 4 || dims[3] != 1 {
        return Err(Error::InvalidShape(format!("expected a (D, H, W, 1) volume, got {:?}", dims)));
    }
    if dims[1..3] != [h, w] {
        return Err(Error::InvalidShape(format!(
            "slices are {}x{}, the model expects {h}x{w}",
            dims[1], dims[2]
        )));
    }
    let spec = WindowingSpec { depth, stride };
    let starts = spec.starts(dims[0])?;
    let per_slice = h * w;
    let mut sum = vec![0.0; image.len()];
    let mut count = vec![0u32; dims[0]];
    for s in starts {
        let slab = image.data()[s * per_slice..(s + depth) * per_slice].to_vec();
        let x = Tensor::from_vec(&[1, depth, h, w, 1], slab, image.precision())?;
        let p = model.infer(&x)?;
        for (acc, &v) in sum[s * per_slice..(s + depth) * per_slice].iter_mut().zip(p.data()) {
            *acc += v;
        }
        for c in &mut count[s..s + depth] {
            *c += 1;
        }
    }
    for (z, &c) in count.iter().enumerate() {
        for v in &mut sum[z * per_slice..(z + 1) * per_slice] {
            *v /= c as f64;
        }
    }
    Tensor::from_vec(dims, sum, model.config().precision)
}

/// Binary mask from [`predict_probabilities`] at the metric threshold.
pub fn predict_mask(model: &AtrousResUNet, image: &Tensor, stride: usize) -> Result<Tensor> {
    binarize(&predict_probabilities(model, image, stride)?)
}

/// Per-volume metric reports and the aggregate over pooled confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub volumes: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

pub fn evaluate_volumes(model: &AtrousResUNet, volumes: &[VolumeSample], stride: usize) -> Result<Evaluation> {
    if volumes.is_empty() {
        return Err(Error::invalid("no volumes to evaluate"));
    }
    let mut total = Confusion::default();
    let mut reports = Vec::with_capacity(volumes.len());
    for v in volumes {
        let pred = predict_mask(model, &v.image, stride)
            .map_err(|e| Error::InvalidShape(format!("volume `{}`: {e}", v.id)))?;
        let counts = Confusion::count(&pred, &v.mask)?;
        total = total.merge(counts);
        reports.push((v.id.clone(), MetricReport::from_counts(counts)?));
    }
    Ok(Evaluation {
        volumes: reports,
        aggregate: MetricReport::from_counts(total)?,
    })
}
