//! Training steps for the dual-head model, the single-task and
//! boundary-penalty baselines, and the forward-pass-only semi-supervised
//! mode; the training loop, evaluation and multi-seed aggregation.

mod run;

pub use run::{
    aggregate, evaluate_model, load_samples, prepare_sample, run_seed, run_seeds, seed_dir, train, BestCheckpoint,
    EvalConfig, Evaluation, LogRecord, RunResult, SeedFailure, SeedResult, TrainData, TrainOutcome, VolumeMetrics,
    BEST_CHECKPOINT, FINAL_CHECKPOINT, LOG_FILE,
};

use crate::backbone::{Backbone, BackboneConfig, DualHeadModel, ModelError};
use crate::data::{AugmentConfig, DataError, Sample};
use crate::losses::{composite_loss, peri_loss, seg_only_loss, LossBreakdown, LossError, LossWeights, LossWithGrad};
use crate::metrics::MetricError;
use crate::morphology::boundary_label;
use crate::nn::{Mode, NormKind, Sgd, Tensor};
use crate::volume::Shape3;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sample {0} has no label")]
    MissingLabel(String),
    #[error("batch item {id} has shape {found}, expected {expected}")]
    BatchShape {
        id: String,
        expected: Shape3,
        found: Shape3,
    },
    #[error("model predicts {found} classes but labels are binary (expected {expected})")]
    ClassCount { expected: usize, found: usize },
    #[error("training diverged at iteration {0}: loss is not finite")]
    Diverged(usize),
    #[error("no seed finished: {}", .0.iter().map(|f| format!("seed {}: {}", f.seed, f.error)).collect::<Vec<_>>().join("; "))]
    AllSeedsFailed(Vec<SeedFailure>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Supervised,
    /// Unlabeled patches join the forward pass only.
    FpSemisup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Boundaryseg,
    /// Segmentation loss only; the boundary head is not built.
    LowerBound,
    /// Single head plus a soft-erosion boundary penalty.
    PeriLoss,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Boundaryseg => "boundaryseg",
            Method::LowerBound => "lower_bound",
            Method::PeriLoss => "peri_loss",
        }
    }

    pub fn uses_boundary_head(self) -> bool {
        self == Method::Boundaryseg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let sgd = Sgd::default();
        Self {
            kind: OptimizerKind::Sgd,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Labeled items per batch in `fp_semisup` mode.
    pub labeled_batch_size: usize,
    /// Boundary kernel size.
    pub r: usize,
    pub weights: LossWeights,
    pub mode: TrainMode,
    pub method: Method,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Validation interval, used only when a validation split exists.
    pub eval_every: usize,
    pub log_every: usize,
    pub patch_size: [usize; 3],
    /// Sliding-window stride; `None` uses half the patch.
    pub inference_stride: Option<[usize; 3]>,
    /// Probability that a training patch is centred on foreground.
    pub foreground_prob: f64,
    pub augment: AugmentConfig,
    /// Fraction of the labeled volumes held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Z-score each image before training and inference.
    pub normalize: bool,
    /// Leave the boundary head out of the optimizer.
    pub freeze_boundary_head: bool,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            batch_size: 4,
            labeled_batch_size: 2,
            r: 5,
            weights: LossWeights::default(),
            mode: TrainMode::Supervised,
            method: Method::Boundaryseg,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            eval_every: 500,
            log_every: 10,
            patch_size: [112, 112, 80],
            inference_stride: None,
            foreground_prob: 0.0,
            augment: AugmentConfig::default(),
            validation_fraction: 0.0,
            normalize: true,
            freeze_boundary_head: false,
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.r == 0 || self.r % 2 == 0 {
            return fail(format!("r must be a positive odd integer, got {}", self.r));
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return fail("eval_every and log_every must be at least 1".into());
        }
        self.weights.validate()?;
        self.backbone.validate()?;
        if self.backbone.in_channels != 1 {
            return fail(format!(
                "backbone in_channels must be 1 for single-channel volumes, got {}",
                self.backbone.in_channels
            ));
        }
        let patch = self.patch();
        self.backbone.check_input(patch)?;
        if let Some(stride) = self.inference_stride {
            for (axis, (s, p)) in ["H", "W", "D"].iter().zip(stride.into_iter().zip(self.patch_size)) {
                if s == 0 || s > p {
                    return fail(format!("inference_stride along {axis} must lie in 1..={p}, got {s}"));
                }
            }
        }
        let opt = &self.optimizer;
        if !(opt.lr > 0.0 && opt.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", opt.lr));
        }
        if !(0.0..1.0).contains(&opt.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", opt.momentum));
        }
        if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", opt.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.foreground_prob) {
            return fail(format!(
                "foreground_prob must lie in [0, 1], got {}",
                self.foreground_prob
            ));
        }
        for (name, p) in [
            ("flip_prob", self.augment.flip_prob),
            ("rotate_prob", self.augment.rotate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("augment.{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.mode == TrainMode::FpSemisup {
            if self.labeled_batch_size == 0 || self.labeled_batch_size >= self.batch_size {
                return fail(format!(
                    "fp_semisup needs 1 <= labeled_batch_size < batch_size, got {} of {}",
                    self.labeled_batch_size, self.batch_size
                ));
            }
            if self.backbone.normalization != NormKind::Batch {
                return fail("fp_semisup requires batch normalization; unlabeled items would have no effect".into());
            }
        }
        Ok(())
    }

    pub fn patch(&self) -> Shape3 {
        Shape3::from_dims(self.patch_size)
    }

    pub fn stride(&self) -> Shape3 {
        Shape3::from_dims(
            self.inference_stride
                .unwrap_or_else(|| self.patch_size.map(|p| (p / 2).max(1))),
        )
    }

    /// Loss weights actually applied: the single-task baseline has none.
    pub fn effective_weights(&self) -> LossWeights {
        match self.method {
            Method::LowerBound => LossWeights {
                lambda_boundary: 0.0,
                lambda_cons: 0.0,
                ..self.weights.clone()
            },
            _ => self.weights.clone(),
        }
    }

    /// Items drawn from the labeled pool per batch.
    pub fn labeled_per_batch(&self) -> usize {
        match self.mode {
            TrainMode::Supervised => self.batch_size,
            TrainMode::FpSemisup => self.labeled_batch_size,
        }
    }
}

const BOUNDARY_HEAD: &str = "boundary_head";

fn check_model<B: Backbone>(model: &DualHeadModel<B>, cfg: &TrainConfig) -> Result<(), TrainError> {
    if model.class_count() != 1 {
        return Err(TrainError::ClassCount {
            expected: 1,
            found: model.class_count(),
        });
    }
    match (cfg.method, model.has_boundary_head()) {
        (Method::Boundaryseg, false) => Err(TrainError::Config(
            "boundaryseg needs a model with a boundary head".into(),
        )),
        (Method::PeriLoss, true) => Err(TrainError::Config("peri_loss needs a single-head model".into())),
        _ => Ok(()),
    }
}

fn stack(items: &[&Sample]) -> Result<Tensor, TrainError> {
    let shape = items[0].image.shape();
    let mut data = Vec::with_capacity(items.len() * shape.len());
    for s in items {
        if s.image.shape() != shape {
            return Err(TrainError::BatchShape {
                id: s.id.clone(),
                expected: shape,
                found: s.image.shape(),
            });
        }
        data.extend_from_slice(s.image.as_slice());
    }
    Ok(Tensor::from_vec(items.len(), 1, shape, data))
}

fn item_loss(seg: &[f32], bnd: Option<&[f32]>, sample: &Sample, cfg: &TrainConfig) -> Result<LossWithGrad, TrainError> {
    let label = sample
        .label
        .as_ref()
        .ok_or_else(|| TrainError::MissingLabel(sample.id.clone()))?;
    let seg: Vec<f64> = seg.iter().map(|&v| v as f64).collect();
    let eps = cfg.weights.dice_epsilon;
    if cfg.method == Method::LowerBound {
        return Ok(seg_only_loss(&seg, &label.to_f64(), eps)?);
    }
    let boundary = match sample.boundary(cfg.r) {
        Some(b) => b.to_f64(),
        None => boundary_label(label, cfg.r).map_err(LossError::from)?.to_f64(),
    };
    Ok(match cfg.method {
        Method::PeriLoss => peri_loss(
            &seg,
            label.shape(),
            &label.to_f64(),
            &boundary,
            cfg.weights.lambda_boundary,
            cfg.r,
            eps,
        )?,
        _ => {
            let bnd: Vec<f64> = bnd.expect("checked boundary head").iter().map(|&v| v as f64).collect();
            composite_loss(&seg, &bnd, &label.to_f64(), &boundary, &cfg.weights)?
        }
    })
}

/// Forward all `items`, take the loss over the first `labeled` only,
/// back-propagate and update.
fn step<B: Backbone>(
    model: &mut DualHeadModel<B>,
    items: &[&Sample],
    labeled: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    check_model(model, cfg)?;
    if labeled == 0 {
        return Err(TrainError::Config(
            "a training batch needs at least one labeled item".into(),
        ));
    }
    for s in &items[..labeled] {
        if s.label.is_none() {
            return Err(TrainError::MissingLabel(s.id.clone()));
        }
    }
    let x = stack(items)?;
    model.zero_grad();
    let out = model.forward(&x, Mode::Train)?;
    let use_bnd = cfg.method.uses_boundary_head();
    let mut grad_seg = Tensor::zeros(out.seg.n, out.seg.c, out.seg.spatial);
    let mut grad_bnd = out
        .boundary
        .as_ref()
        .filter(|_| use_bnd)
        .map(|b| Tensor::zeros(b.n, b.c, b.spatial));
    let scale = 1.0 / labeled as f64;
    let mut parts = Vec::with_capacity(labeled);
    for (i, sample) in items[..labeled].iter().enumerate() {
        let bnd = out.boundary.as_ref().filter(|_| use_bnd).map(|b| b.item(i));
        let loss = item_loss(out.seg.item(i), bnd, sample, cfg)?;
        for (g, v) in grad_seg.item_mut(i).iter_mut().zip(&loss.grad_seg) {
            *g = (v * scale) as f32;
        }
        if let Some(gb) = grad_bnd.as_mut() {
            for (g, v) in gb.item_mut(i).iter_mut().zip(&loss.grad_boundary) {
                *g = (v * scale) as f32;
            }
        }
        parts.push(loss.breakdown);
    }
    let breakdown = LossBreakdown::mean(&parts);
    model.backward(&grad_seg, grad_bnd.as_ref());
    let freeze = cfg.freeze_boundary_head;
    cfg.optimizer.sgd().step(model.named_params_mut(), |name| {
        freeze && name.starts_with(BOUNDARY_HEAD)
    });
    Ok(breakdown)
}

/// One update on a fully labeled batch with the configured method's loss.
pub fn train_step_supervised<B: Backbone>(
    model: &mut DualHeadModel<B>,
    labeled: &[Sample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let items: Vec<&Sample> = labeled.iter().collect();
    step(model, &items, items.len(), cfg)
}

/// One update where unlabeled items share the forward pass (and so the
/// batch statistics) but never enter the loss; their label slots are not
/// read.
pub fn train_step_fp<B: Backbone>(
    model: &mut DualHeadModel<B>,
    labeled: &[Sample],
    unlabeled: &[Sample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    if cfg.mode != TrainMode::FpSemisup {
        return Err(TrainError::Config(
            "train_step_fp called outside fp_semisup mode".into(),
        ));
    }
    if !model.trunk().batch_statistics() {
        return Err(TrainError::Config(
            "fp_semisup requires batch normalization; unlabeled items would have no effect".into(),
        ));
    }
    let items: Vec<&Sample> = labeled.iter().chain(unlabeled).collect();
    step(model, &items, labeled.len(), cfg)
}

/// One update of the single-head boundary-penalty baseline.
pub fn train_step_peri<B: Backbone>(
    model: &mut DualHeadModel<B>,
    labeled: &[Sample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    if cfg.method != Method::PeriLoss {
        return Err(TrainError::Config(format!(
            "train_step_peri needs method peri_loss, got {}",
            cfg.method.name()
        )));
    }
    train_step_supervised(model, labeled, cfg)
}
