//! Samples on disk and in memory: loading, synthetic phantoms, patch
//! sampling, augmentation and sliding-window inference.

mod inference;
mod io;
mod manifest;
mod sampling;
mod synthetic;

pub use inference::{sliding_window_infer, window_starts, Predictor, WindowOutput};
pub use io::{load_sample, save_sample, SampleFormat, SampleMeta};
pub use manifest::{load_manifest, DatasetManifest, ManifestFile};
pub use sampling::{augment, random_patch, AugmentConfig, Transform};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::morphology::{boundary_label, MorphologyError};
use crate::volume::{BinaryMask, ImageVolume, VolumeError};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("sample {id}: {source}")]
    Volume {
        id: String,
        #[source]
        source: VolumeError,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest: id {0} appears more than once")]
    DuplicateId(String),
    #[error("manifest: {0}")]
    Overlap(String),
    #[error("missing sample file {0}")]
    MissingFile(PathBuf),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Morphology(#[from] MorphologyError),
}

impl DataError {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        DataError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Boundary band of a sample's label for one kernel size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryCache {
    pub r: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageVolume,
    pub label: Option<BinaryMask>,
    pub boundary_cache: Option<BoundaryCache>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageVolume, label: Option<BinaryMask>) -> Result<Self, DataError> {
        let id = id.into();
        if let Some(l) = &label {
            if l.shape() != image.shape() {
                return Err(DataError::Volume {
                    id,
                    source: VolumeError::ShapeMismatch {
                        field: "label",
                        expected: image.shape(),
                        found: l.shape(),
                    },
                });
            }
        }
        Ok(Self {
            id,
            image,
            label,
            boundary_cache: None,
        })
    }

    /// Compute (or reuse) the boundary band for kernel size `r`. A cache
    /// built for another `r` is replaced.
    pub fn ensure_boundary(&mut self, r: usize) -> Result<Option<&BinaryMask>, DataError> {
        let Some(label) = &self.label else {
            return Ok(None);
        };
        if self.boundary_cache.as_ref().map(|c| c.r) != Some(r) {
            self.boundary_cache = Some(BoundaryCache {
                r,
                mask: boundary_label(label, r)?,
            });
        }
        Ok(self.boundary_cache.as_ref().map(|c| &c.mask))
    }

    pub fn boundary(&self, r: usize) -> Option<&BinaryMask> {
        self.boundary_cache.as_ref().filter(|c| c.r == r).map(|c| &c.mask)
    }

    /// Copy with the image replaced by its per-volume z-score.
    pub fn normalized(&self) -> Sample {
        Sample {
            image: self.image.zscore(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;

    #[test]
    fn boundary_cache_follows_kernel_size() {
        let s = Shape3::cube(7);
        let label = BinaryMask::from_fn(s, |i, j, k| {
            (1..6).contains(&i) && (1..6).contains(&j) && (1..6).contains(&k)
        });
        let image = ImageVolume::new(s, vec![0.0; s.len()], [1.0; 3]).unwrap();
        let mut sample = Sample::new("a", image, Some(label.clone())).unwrap();
        assert!(sample.boundary(3).is_none());
        let b3 = sample.ensure_boundary(3).unwrap().unwrap().clone();
        assert_eq!(b3, boundary_label(&label, 3).unwrap());
        assert_eq!(sample.boundary(3), Some(&b3));
        sample.ensure_boundary(5).unwrap();
        assert!(sample.boundary(3).is_none());
        assert_eq!(sample.boundary(5).unwrap(), &boundary_label(&label, 5).unwrap());
    }

    #[test]
    fn mismatched_label_is_rejected_with_id() {
        let image = ImageVolume::new(Shape3::cube(2), vec![0.0; 8], [1.0; 3]).unwrap();
        let err = Sample::new("case_7", image, Some(BinaryMask::zeros(Shape3::cube(3)))).unwrap_err();
        assert!(err.to_string().contains("case_7"));
    }
}
