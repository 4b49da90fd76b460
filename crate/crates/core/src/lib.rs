//! Boundary-aware multi-task volumetric segmentation.

pub mod backbone;
pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod morphology;
pub mod nn;
pub mod trainer;
pub mod volume;

pub use backbone::{BackboneConfig, DualHeadModel, ModelError};
pub use data::{DataError, DatasetManifest, Sample, SyntheticSpec};
pub use harness::{ExperimentConfig, HarnessError, SweepSpec};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{MetricOptions, SegMetrics};
pub use trainer::{Method, RunResult, TrainConfig, TrainError, TrainMode};
pub use volume::{BinaryMask, FeatureVolume, ImageVolume, ProbabilityMap, Shape3};
