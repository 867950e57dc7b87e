//! Dense rank-N real arrays.
//!
//! Feature maps use the fixed dimension order `(N, V, H, W, C)`: sample,
//! volume (slice), height, width, channel. Values are held as `f64`
//! regardless of [`Precision`]; a tensor in [`Precision::F32`] has every
//! value rounded through `f32` on construction, so 32-bit mode carries
//! exactly the information a 32-bit store would.
//!
//! Tensors are immutable once built. Every operation allocates a fresh
//! contiguous row-major result and rejects NaN/Inf outputs.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Axis indices of a feature map.
pub mod axis {
    pub const N: usize = 0;
    pub const V: usize = 1;
    pub const H: usize = 2;
    pub const W: usize = 3;
    pub const C: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }

    /// The lower of two precisions; binary operations demote to it.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidShape(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                dims.len()
            )));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extent of axis {axis} is zero in {dims:?}"
            )));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.rank() {
            return Err(Error::invalid(format!(
                "coordinate rank {} does not match shape {self}",
                coords.len()
            )));
        }
        let mut idx = 0;
        for (axis, (&c, &d)) in coords.iter().zip(&self.0).enumerate() {
            if c >= d {
                return Err(Error::invalid(format!(
                    "coordinate {c} out of range for axis {axis} of {self}"
                )));
            }
            idx = idx * d + c;
        }
        Ok(idx)
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut coords = vec![0; self.rank()];
        for i in (0..self.rank()).rev() {
            coords[i] = flat % self.0[i];
            flat /= self.0[i];
        }
        coords
    }

    /// Same dims with `axis` replaced by `extent`.
    pub fn with_axis(&self, axis: usize, extent: usize) -> Result<Shape> {
        let mut dims = self.0.clone();
        dims[axis] = extent;
        Shape::new(dims)
    }

    /// True when every axis of `self` is either equal to `target`'s or 1.
    pub fn broadcasts_to(&self, target: &Shape) -> bool {
        self.rank() == target.rank()
            && self
                .0
                .iter()
                .zip(&target.0)
                .all(|(&s, &t)| s == t || s == 1)
    }

    /// Interprets a rank-5 shape as `(N, V, H, W, C)`.
    pub fn as_nvhwc(&self) -> Result<[usize; 5]> {
        match self.0.as_slice() {
            &[n, v, h, w, c] => Ok([n, v, h, w, c]),
            _ => Err(Error::InvalidShape(format!(
                "expected a rank-5 (N,V,H,W,C) feature map, got {self}"
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "×")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;
    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor, rounding to `precision` and rejecting non-finite values.
    pub fn new(shape: Shape, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "construct",
                index,
                value: data[index],
            });
        }
        Ok(Tensor {
            shape,
            data,
            precision,
        })
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Shape,
        data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        Tensor::new(shape, data, precision).map_err(|e| match e {
            Error::NonFinite { index, value, .. } => Error::NonFinite { op, index, value },
            other => other,
        })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(Shape::new(dims.to_vec())?, data, precision)
    }

    pub fn full(dims: &[usize], value: f64, precision: Precision) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let n = shape.numel();
        Tensor::new(shape, vec![value; n], precision)
    }

    pub fn zeros(dims: &[usize], precision: Precision) -> Result<Self> {
        Tensor::full(dims, 0.0, precision)
    }

    pub fn ones(dims: &[usize], precision: Precision) -> Result<Self> {
        Tensor::full(dims, 1.0, precision)
    }

    pub fn scalar(value: f64, precision: Precision) -> Result<Self> {
        Tensor::new(Shape::scalar(), vec![value], precision)
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
            precision: self.precision,
        }
    }

    pub fn from_fn(
        dims: &[usize],
        precision: Precision,
        mut f: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor::new(shape, data, precision)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn to_precision(&self, precision: Precision) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone(), precision)
    }

    pub fn get(&self, coords: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.flat_index(coords)?])
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "item() on tensor of shape {}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_op(op, self.shape.clone(), data, self.precision)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map("scale", |v| v * factor)
    }

    fn zip_same(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_op(
            op,
            self.shape.clone(),
            data,
            self.precision.join(other.precision),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    /// Element-wise product; `other` may have singleton axes that broadcast
    /// against `self`.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape == other.shape {
            return self.zip_same(other, "mul", |a, b| a * b);
        }
        if !other.shape.broadcasts_to(&self.shape) {
            return Err(Error::ShapeMismatch {
                op: "mul (broadcast)",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let index = broadcast_index(&other.shape, &self.shape);
        let data = self
            .data
            .iter()
            .zip(&index)
            .map(|(&a, &j)| a * other.data[j])
            .collect();
        Tensor::from_op(
            "mul",
            self.shape.clone(),
            data,
            self.precision.join(other.precision),
        )
    }

    /// Materializes `self` tiled along its singleton axes to `dims`.
    pub fn broadcast_to(&self, dims: &[usize]) -> Result<Tensor> {
        let target = Shape::new(dims.to_vec())?;
        if !self.shape.broadcasts_to(&target) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: target,
            });
        }
        let data = broadcast_index(&self.shape, &target)
            .into_iter()
            .map(|j| self.data[j])
            .collect();
        Tensor::new(target, data, self.precision)
    }

    /// Sums `self` down to `target`, the adjoint of broadcasting.
    pub fn sum_to(&self, target: &Shape) -> Result<Tensor> {
        if !target.broadcasts_to(&self.shape) {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape.clone(),
                rhs: target.clone(),
            });
        }
        let mut out = vec![0.0; target.numel()];
        for (&v, j) in self.data.iter().zip(broadcast_index(target, &self.shape)) {
            out[j] += v;
        }
        Tensor::from_op("sum_to", target.clone(), out, self.precision)
    }

    /// Concatenates along the last (channel) axis; `self` fills the leading block.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let rank = self.shape.rank();
        if rank == 0 || rank != other.shape.rank() || self.dims()[..rank - 1] != other.dims()[..rank - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let ca = self.dims()[rank - 1];
        let cb = other.dims()[rank - 1];
        let rows = self.len() / ca;
        let mut data = Vec::with_capacity(self.len() + other.len());
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&other.data[r * cb..(r + 1) * cb]);
        }
        Tensor::new(
            self.shape.with_axis(rank - 1, ca + cb)?,
            data,
            self.precision.join(other.precision),
        )
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.shape.rank();
        let c = *self
            .dims()
            .last()
            .ok_or_else(|| Error::invalid("slice_channels on a scalar"))?;
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "channel range {start}..{end} invalid for {c} channels"
            )));
        }
        let rows = self.len() / c;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + end]);
        }
        Tensor::new(self.shape.with_axis(rank - 1, end - start)?, data, self.precision)
    }

    /// Reduces over `axes`, keeping them as singleton extents.
    pub fn reduce(&self, axes: &[usize], mode: ReduceMode) -> Result<Tensor> {
        let (out_shape, map) = reduction_map(&self.shape, axes)?;
        let count = self.len() / out_shape.numel();
        let mut out = match mode {
            ReduceMode::Max => vec![f64::NEG_INFINITY; out_shape.numel()],
            _ => vec![0.0; out_shape.numel()],
        };
        for (&v, &j) in self.data.iter().zip(&map) {
            match mode {
                ReduceMode::Max => {
                    if v > out[j] {
                        out[j] = v
                    }
                }
                _ => out[j] += v,
            }
        }
        if mode == ReduceMode::Mean {
            let n = count as f64;
            for v in &mut out {
                *v /= n;
            }
        }
        Tensor::from_op("reduce", out_shape, out, self.precision)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes the little-endian binary form: rank, extents (u64 each),
    /// precision tag (bit width, u8), then raw values at that width.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.rank() as u64).to_le_bytes())?;
        for &d in self.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[self.precision.bits()])?;
        match self.precision {
            Precision::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Precision::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let rank = read_u64(r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Serialization(format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r)? as usize);
        }
        let shape = Shape::new(dims).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag)?;
        let precision = Precision::from_bits(tag[0] as u32)
            .ok_or_else(|| Error::Serialization(format!("unknown precision tag {}", tag[0])))?;
        let n = shape.numel();
        let mut data = Vec::with_capacity(n);
        match precision {
            Precision::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    read_exact(r, &mut b)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
            Precision::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    read_exact(r, &mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
            }
        }
        Tensor::new(shape, data, precision)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Serialization("truncated tensor stream".into()),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// For each flat index of `target`, the flat index of `src` it reads when
/// `src` is broadcast along its singleton axes.
pub(crate) fn broadcast_index(src: &Shape, target: &Shape) -> Vec<usize> {
    let src_strides = src.strides();
    let eff: Vec<usize> = src
        .dims()
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = Vec::with_capacity(target.numel());
    odometer(target.dims(), |coords| {
        out.push(coords.iter().zip(&eff).map(|(c, s)| c * s).sum());
    });
    out
}

/// Output shape and, for each input flat index, its output flat index.
pub(crate) fn reduction_map(shape: &Shape, axes: &[usize]) -> Result<(Shape, Vec<usize>)> {
    let rank = shape.rank();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::invalid(format!("axis {a} out of range for rank {rank}")));
        }
        if reduced[a] {
            return Err(Error::invalid(format!("duplicate reduction axis {a}")));
        }
        reduced[a] = true;
    }
    let out_dims: Vec<usize> = shape
        .dims()
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let out_shape = Shape::new(out_dims)?;
    let map = broadcast_index(&out_shape, shape);
    Ok((out_shape, map))
}

/// Visits every coordinate of `dims` in row-major order.
fn odometer(dims: &[usize], mut f: impl FnMut(&[usize])) {
    let total: usize = dims.iter().product();
    let mut coords = vec![0usize; dims.len()];
    for _ in 0..total {
        f(&coords);
        for i in (0..dims.len()).rev() {
            coords[i] += 1;
            if coords[i] < dims[i] {
                break;
            }
            coords[i] = 0;
        }
    }
}
