use serde::{Deserialize, Serialize};

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-depth slabs taken every `stride` slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowingSpec {
    pub depth: usize,
    pub stride: usize,
}

impl Default for WindowingSpec {
    fn default() -> Self {
        WindowingSpec { depth: 16, stride: 5 }
    }
}

impl WindowingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.stride == 0 || self.stride > self.depth {
            return Err(Error::config(
                "windowing",
                format!("need 1 <= stride <= depth, got stride {} depth {}", self.stride, self.depth),
            ));
        }
        Ok(())
    }

    /// Starts `0, stride, 2·stride, …` plus a tail window ending at the last
    /// slice when the stride does not land there.
    pub fn starts(&self, total: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if total < self.depth {
            return Err(Error::invalid(format!(
                "volume depth {total} is smaller than the window depth {}",
                self.depth
            )));
        }
        let last = total - self.depth;
        let mut starts: Vec<usize> = (0..=last).step_by(self.stride).collect();
        if starts.last() != Some(&last) {
            starts.push(last);
        }
        Ok(starts)
    }
}

fn slab(t: &Tensor, start: usize, depth: usize) -> Result<Tensor> {
    let d = t.dims();
    let per_slice: usize = d[1..].iter().product();
    let data = t.data()[start * per_slice..(start + depth) * per_slice].to_vec();
    let mut dims = d.to_vec();
    dims[0] = depth;
    Tensor::from_vec(&dims, data, t.precision())
}

/// Copies every window of `vol` as its own sample.
pub fn extract_windows(vol: &VolumeSample, spec: &WindowingSpec) -> Result<Vec<VolumeSample>> {
    spec.starts(vol.depth())?
        .into_iter()
        .map(|s| {
            Ok(VolumeSample {
                id: format!("{}@{s}", vol.id),
                image: slab(&vol.image, s, spec.depth)?,
                mask: slab(&vol.mask, s, spec.depth)?,
                slices: (vol.slices.0 + s, vol.slices.0 + s + spec.depth),
            })
        })
        .collect()
}
