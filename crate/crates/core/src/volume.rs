//! Volumetric value types shared by every other module.
//!
//! All grids use the axis order `(H, W, D)` with `D` varying fastest, so the
//! flat index of voxel `(i, j, k)` is `(i * W + j) * D + k`.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("{field}: shape mismatch, expected {expected} but found {found}")]
    ShapeMismatch {
        field: &'static str,
        expected: Shape3,
        found: Shape3,
    },
    #[error("{field}: buffer holds {found} values but shape {shape} needs {expected}")]
    LengthMismatch {
        field: &'static str,
        shape: Shape3,
        expected: usize,
        found: usize,
    },
    #[error("{field}: non-binary label value {value} at flat index {index}")]
    NonBinaryLabel {
        field: &'static str,
        value: u32,
        index: usize,
    },
    #[error("{field}: non-finite value at flat index {index}")]
    NonFinite { field: &'static str, index: usize },
    #[error("{field}: value {value} at flat index {index} lies outside [0, 1]")]
    OutOfUnitRange {
        field: &'static str,
        value: f32,
        index: usize,
    },
    #[error("spacing components must be finite and strictly positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("every axis must hold at least one voxel, got {0}")]
    EmptyShape(Shape3),
}

/// Extent of a volume along `(H, W, D)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Shape3 {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    pub const fn cube(n: usize) -> Self {
        Self { h: n, w: n, d: n }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn from_dims(dims: [usize; 3]) -> Self {
        Self::new(dims[0], dims[1], dims[2])
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.h && j < self.w && k < self.d);
        (i * self.w + j) * self.d + k
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let k = index % self.d;
        let rest = index / self.d;
        (rest / self.w, rest % self.w, k)
    }

    /// Flat index of a signed coordinate, or `None` outside the volume.
    #[inline]
    pub fn checked_index(&self, i: isize, j: isize, k: isize) -> Option<usize> {
        if i < 0 || j < 0 || k < 0 {
            return None;
        }
        let (i, j, k) = (i as usize, j as usize, k as usize);
        (i < self.h && j < self.w && k < self.d).then(|| self.index(i, j, k))
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

/// Physical voxel size in millimetres along `(H, W, D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(spacing: [f64; 3]) -> Result<Self, VolumeError> {
        if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(Self(spacing))
        } else {
            Err(VolumeError::InvalidSpacing(spacing))
        }
    }

    /// Length of the volume diagonal in millimetres.
    pub fn diagonal_mm(&self, shape: Shape3) -> f64 {
        shape
            .dims()
            .iter()
            .zip(self.0.iter())
            .map(|(&n, &s)| (n as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::ISOTROPIC
    }
}

/// Dense 3D grid of voxels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self, VolumeError> {
        Self::with_field("grid", shape, data)
    }

    fn with_field(field: &'static str, shape: Shape3, data: Vec<T>) -> Result<Self, VolumeError> {
        if shape.is_empty() {
            return Err(VolumeError::EmptyShape(shape));
        }
        if data.len() != shape.len() {
            return Err(VolumeError::LengthMismatch {
                field,
                shape,
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        assert!(!shape.is_empty(), "grid shape {shape} has an empty axis");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(!shape.is_empty(), "grid shape {shape} has an empty axis");
        let mut data = Vec::with_capacity(shape.len());
        for i in 0..shape.h {
            for j in 0..shape.w {
                for k in 0..shape.d {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.shape.index(i, j, k)]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// Scalar image with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    voxels: Grid<f32>,
    spacing: Spacing,
}

impl ImageVolume {
    pub fn new(shape: Shape3, data: Vec<f32>, spacing: [f64; 3]) -> Result<Self, VolumeError> {
        let voxels = Grid::with_field("image", shape, data)?;
        if let Some(index) = voxels.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { field: "image", index });
        }
        Ok(Self {
            voxels,
            spacing: Spacing::new(spacing)?,
        })
    }

    pub fn from_grid(voxels: Grid<f32>, spacing: Spacing) -> Result<Self, VolumeError> {
        let shape = voxels.shape();
        Self::new(shape, voxels.into_vec(), spacing.0)
    }

    pub fn shape(&self) -> Shape3 {
        self.voxels.shape()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &Grid<f32> {
        &self.voxels
    }

    pub fn as_slice(&self) -> &[f32] {
        self.voxels.as_slice()
    }

    /// Per-volume z-score normalisation; constant images map to zeros.
    pub fn zscore(&self) -> ImageVolume {
        let data = self.as_slice();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let voxels = if std > 1e-12 {
            self.voxels.map(|v| ((v as f64 - mean) / std) as f32)
        } else {
            self.voxels.map(|_| 0.0)
        };
        ImageVolume {
            voxels,
            spacing: self.spacing,
        }
    }
}

/// Voxelwise {0, 1} label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    voxels: Grid<u8>,
}

impl BinaryMask {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self, VolumeError> {
        Self::from_grid(Grid::with_field("label", shape, data)?)
    }

    pub fn from_grid(voxels: Grid<u8>) -> Result<Self, VolumeError> {
        check_binary("label", &voxels)?;
        Ok(Self { voxels })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            voxels: Grid::filled(shape, 0),
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        Self {
            voxels: Grid::from_fn(shape, |i, j, k| f(i, j, k) as u8),
        }
    }

    pub(crate) fn from_grid_unchecked(voxels: Grid<u8>) -> Self {
        debug_assert!(voxels.as_slice().iter().all(|&v| v <= 1));
        Self { voxels }
    }

    pub fn shape(&self) -> Shape3 {
        self.voxels.shape()
    }

    pub fn voxels(&self) -> &Grid<u8> {
        &self.voxels
    }

    pub fn as_slice(&self) -> &[u8] {
        self.voxels.as_slice()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels.get(i, j, k) != 0
    }

    pub fn count(&self) -> usize {
        self.as_slice().iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.as_slice().iter().all(|&v| v == 0)
    }

    /// `true` when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.as_slice().iter().zip(other.as_slice()).all(|(&a, &b)| a <= b)
    }

    pub fn xor(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a | b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        assert_eq!(self.shape(), other.shape(), "mask shapes differ");
        let data = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| f(a, b))
            .collect();
        BinaryMask {
            voxels: Grid {
                shape: self.shape(),
                data,
            },
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.as_slice().iter().map(|&v| v as f64).collect()
    }

    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            voxels: self.voxels.map(|v| v as f32),
        }
    }
}

/// Integer label map where 0 is background and every other id is a class.
pub type LabelMap = Grid<u32>;

/// Voxelwise probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    voxels: Grid<f32>,
}

impl ProbabilityMap {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::from_grid(Grid::with_field("probability", shape, data)?)
    }

    pub fn from_grid(voxels: Grid<f32>) -> Result<Self, VolumeError> {
        for (index, &value) in voxels.as_slice().iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(VolumeError::OutOfUnitRange {
                    field: "probability",
                    value,
                    index,
                });
            }
        }
        Ok(Self { voxels })
    }

    pub fn constant(shape: Shape3, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            voxels: Grid::filled(shape, value),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.voxels.shape()
    }

    pub fn voxels(&self) -> &Grid<f32> {
        &self.voxels
    }

    pub fn as_slice(&self) -> &[f32] {
        self.voxels.as_slice()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.as_slice().iter().map(|&v| v as f64).collect()
    }
}

/// Channel-first feature grid `C x H x W x D` emitted by a backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl FeatureVolume {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }
}

fn check_binary(field: &'static str, grid: &Grid<u8>) -> Result<(), VolumeError> {
    match grid.as_slice().iter().position(|&v| v > 1) {
        Some(index) => Err(VolumeError::NonBinaryLabel {
            field,
            value: grid.as_slice()[index] as u32,
            index,
        }),
        None => Ok(()),
    }
}

/// Binarise a probability map: a voxel is foreground iff `p >= threshold`.
///
/// Panics unless `0 < threshold < 1`.
pub fn mask_from_probability(p: &ProbabilityMap, threshold: f32) -> BinaryMask {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie strictly between 0 and 1, got {threshold}"
    );
    BinaryMask {
        voxels: p.voxels.map(|v| (v >= threshold) as u8),
    }
}

/// Check that a raw label grid is binary and matches the image shape.
pub fn validate_pair(image: &ImageVolume, label: &Grid<u8>) -> Result<(), VolumeError> {
    if image.shape() != label.shape() {
        return Err(VolumeError::ShapeMismatch {
            field: "label",
            expected: image.shape(),
            found: label.shape(),
        });
    }
    check_binary("label", label)
}
