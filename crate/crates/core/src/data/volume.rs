//! Volume samples and their on-disk format.
//!
//! A volume `<id>` in a dataset directory is four files:
//!
//! ```text
//! <id>.img.toml   manifest of the image
//! <id>.img.raw    little-endian voxels, V-major then H then W
//! <id>.msk.toml   manifest of the binary mask
//! <id>.msk.raw
//! ```
//!
//! A manifest is TOML with the keys `extents = [V, H, W]`, `dtype` (one of
//! `u8`, `i16`, `u16`, `f32`, `f64`), `value_range = [lo, hi]` (every voxel
//! must lie in it) and `spacing = [dv, dh, dw]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// One image volume with its binary mask, both `(V, H, W, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// Normalized to `[0, 1]`.
    pub image: Tensor,
    /// Values in `{0, 1}`.
    pub mask: Tensor,
    /// Slice range `[start, end)` of the source volume this sample covers.
    pub slices: (usize, usize),
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        let depth = image.dims().first().copied().unwrap_or(0);
        let s = VolumeSample {
            id: id.into(),
            image,
            mask,
            slices: (0, depth),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.image.dims();
        if d.len() != 4 || d[3] != 1 {
            return Err(Error::InvalidShape(format!(
                "volume `{}` image must be (V×H×W×1), got {}",
                self.id,
                self.image.shape()
            )));
        }
        if self.mask.shape() != self.image.shape() {
            return Err(Error::ShapeMismatch {
                op: "volume sample",
                lhs: self.image.shape().clone(),
                rhs: self.mask.shape().clone(),
            });
        }
        if let Some(i) = self.mask.data().iter().position(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid(format!("volume `{}` mask is not binary at voxel {i}", self.id)));
        }
        if let Some(i) = self.image.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("volume `{}` image leaves [0, 1] at voxel {i}", self.id)));
        }
        if self.slices.1 - self.slices.0 != d[0] {
            return Err(Error::invalid(format!("volume `{}` slice range does not match its depth", self.id)));
        }
        Ok(())
    }

    /// `[V, H, W]`.
    pub fn extents(&self) -> [usize; 3] {
        let d = self.image.dims();
        [d[0], d[1], d[2]]
    }

    pub fn depth(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum_all() / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    I16,
    U16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 | Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Dtype::U8 => b[0] as f64,
            Dtype::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Dtype::U8 => out.push(v as u8),
            Dtype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Dtype::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeManifest {
    pub extents: [usize; 3],
    pub dtype: Dtype,
    pub value_range: [f64; 2],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Image stem `<dir>/<id>.img`.
pub fn image_stem(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.img"))
}

/// Mask stem `<dir>/<id>.msk`.
pub fn mask_stem(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.msk"))
}

/// Reads `<stem>.toml` and `<stem>.raw` without normalizing.
pub fn read_raw(stem: &Path) -> Result<(VolumeManifest, Vec<f64>)> {
    let manifest_path = with_suffix(stem, ".toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::data(&manifest_path, e.to_string()))?;
    let manifest: VolumeManifest =
        toml::from_str(&text).map_err(|e| Error::data(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.extents.contains(&0) {
        return Err(Error::data(&manifest_path, "extents must be positive"));
    }
    let [lo, hi] = manifest.value_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::data(&manifest_path, "value_range must be finite with lo <= hi"));
    }

    let raw_path = with_suffix(stem, ".raw");
    let bytes = fs::read(&raw_path).map_err(|e| Error::data(&raw_path, e.to_string()))?;
    let size = manifest.dtype.size();
    let expected = manifest.extents.iter().product::<usize>() * size;
    if bytes.len() != expected {
        return Err(Error::data(
            &raw_path,
            format!(
                "expected {expected} bytes for extents {:?} of {:?}, found {}",
                manifest.extents,
                manifest.dtype,
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(expected / size);
    for (i, chunk) in bytes.chunks_exact(size).enumerate() {
        let v = manifest.dtype.decode(chunk);
        if !v.is_finite() {
            return Err(Error::data(&raw_path, format!("non-finite voxel {v} at byte offset {}", i * size)));
        }
        if v < lo || v > hi {
            return Err(Error::data(
                &raw_path,
                format!("voxel {v} at byte offset {} is outside value_range [{lo}, {hi}]", i * size),
            ));
        }
        values.push(v);
    }
    Ok((manifest, values))
}

/// Writes `<stem>.toml` and `<stem>.raw`.
pub fn write_raw(stem: &Path, extents: [usize; 3], dtype: Dtype, spacing: [f64; 3], values: &[f64]) -> Result<()> {
    if values.len() != extents.iter().product::<usize>() {
        return Err(Error::invalid("voxel count does not match extents"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let manifest = VolumeManifest {
        extents,
        dtype,
        value_range: [lo, hi],
        spacing,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(with_suffix(stem, ".toml"), text)?;
    let mut bytes = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        dtype.encode(v, &mut bytes);
    }
    fs::write(with_suffix(stem, ".raw"), bytes)?;
    Ok(())
}

/// Min-max normalization to `[0, 1]`; a constant volume becomes zeros.
pub fn normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

fn volume_tensor(extents: [usize; 3], values: Vec<f64>) -> Result<Tensor> {
    Tensor::from_vec(&[extents[0], extents[1], extents[2], 1], values, Precision::F64)
}

/// Reads a binary mask `<stem>.toml` / `<stem>.raw`.
pub fn load_mask(stem: &Path) -> Result<Tensor> {
    let (manifest, values) = read_raw(stem)?;
    if let Some(i) = values.iter().position(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::data(
            with_suffix(stem, ".raw"),
            format!("mask voxel {} at byte offset {} is not 0 or 1", values[i], i * manifest.dtype.size()),
        ));
    }
    volume_tensor(manifest.extents, values)
}

pub fn save_mask(stem: &Path, mask: &Tensor) -> Result<()> {
    let d = mask.dims();
    if d.len() != 4 || d[3] != 1 {
        return Err(Error::InvalidShape(format!("mask must be (V×H×W×1), got {}", mask.shape())));
    }
    write_raw(stem, [d[0], d[1], d[2]], Dtype::U8, [1.0; 3], mask.data())
}

/// Reads an image `<stem>.toml` / `<stem>.raw`, min-max normalized.
pub fn load_image(stem: &Path) -> Result<Tensor> {
    let (manifest, mut values) = read_raw(stem)?;
    normalize(&mut values);
    volume_tensor(manifest.extents, values)
}

/// Loads volume `id` from `dir`, min-max normalizing the image.
pub fn load_volume(dir: &Path, id: &str) -> Result<VolumeSample> {
    let image = load_image(&image_stem(dir, id))?;
    let mask_stem = mask_stem(dir, id);
    let mask = load_mask(&mask_stem)?;
    if mask.shape() != image.shape() {
        return Err(Error::data(
            with_suffix(&mask_stem, ".toml"),
            format!("mask extents {} differ from image extents {}", mask.shape(), image.shape()),
        ));
    }
    VolumeSample::new(id, image, mask)
}

/// Writes `sample` to `dir`: the image as `f64`, the mask as `u8`.
pub fn save_volume(dir: &Path, sample: &VolumeSample) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir)?;
    write_raw(&image_stem(dir, &sample.id), sample.extents(), Dtype::F64, [1.0; 3], sample.image.data())?;
    save_mask(&mask_stem(dir, &sample.id), &sample.mask)
}

/// Ids of every `<id>.img.toml` in `dir`, sorted.
pub fn list_volumes(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".img.toml")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<VolumeSample>> {
    list_volumes(dir)?.iter().map(|id| load_volume(dir, id)).collect()
}
