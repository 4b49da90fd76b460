//! Shared encoder-decoder trunk with two single-convolution heads.
//!
//! The trunk emits a `C`-channel feature volume at full resolution; a
//! segmentation head and a boundary head each apply one 1x1x1 convolution
//! to those features followed by a sigmoid (one class) or a channel-wise
//! softmax (several classes).

use crate::nn::{self, join, Conv3d, ConvTranspose3d, Mode, Norm, NormKind, Param, Parameters, Relu, Tensor};
use crate::volume::{FeatureVolume, ImageVolume, ProbabilityMap, Shape3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "volseg";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("input axis {axis} has size {size}, which is not divisible by {divisor}")]
    IncompatibleShape {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },
    #[error("input has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channels of the full-resolution feature volume fed to both heads.
    pub feature_channels: usize,
    /// Number of resolution levels, including the full-resolution one.
    pub depth: usize,
    /// Channels at the first level; doubles at every level below.
    pub base_width: usize,
    pub normalization: NormKind,
    pub activation: Activation,
    /// Level `l` stacks `min(l + 1, max_convs_per_stage)` convolutions.
    pub max_convs_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            feature_channels: 16,
            depth: 5,
            base_width: 16,
            normalization: NormKind::Batch,
            activation: Activation::Relu,
            max_convs_per_stage: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.in_channels == 0 {
            return fail("in_channels must be at least 1");
        }
        if self.feature_channels == 0 {
            return fail("feature_channels must be at least 1");
        }
        if self.depth < 2 {
            return fail("depth must be at least 2");
        }
        if self.base_width == 0 {
            return fail("base_width must be at least 1");
        }
        if self.max_convs_per_stage == 0 {
            return fail("max_convs_per_stage must be at least 1");
        }
        Ok(())
    }

    /// Every spatial axis must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, shape: Shape3) -> Result<(), ModelError> {
        let divisor = self.size_divisor();
        for (axis, size) in ["H", "W", "D"].into_iter().zip(shape.dims()) {
            if size == 0 || size % divisor != 0 {
                return Err(ModelError::IncompatibleShape { axis, size, divisor });
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn convs(&self, level: usize) -> usize {
        (level + 1).min(self.max_convs_per_stage)
    }
}

/// A trunk that maps an image batch to a full-resolution feature batch.
pub trait Backbone: Parameters {
    fn feature_channels(&self) -> usize;
    /// True when normalisation couples the items of a batch.
    fn batch_statistics(&self) -> bool;
    fn check_input(&self, input: &Tensor) -> Result<(), ModelError>;
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor;
    /// Accumulates parameter gradients from the gradient of the features.
    fn backward(&mut self, grad: &Tensor);
}

/// Convolution, normalisation and activation.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv3d,
    norm: Norm,
    relu: Relu,
}

impl ConvUnit {
    fn new(conv: Conv3d, kind: NormKind) -> Self {
        let norm = Norm::new(kind, conv.out_channels());
        Self {
            conv,
            norm,
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.conv.forward(x, mode);
        let y = self.norm.forward(&y, mode);
        self.relu.forward(y, mode)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        let g = self.norm.backward(&g);
        self.conv.backward(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.norm.params(&join(prefix, "norm"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.norm.params_mut(&join(prefix, "norm"), out);
    }
}

#[derive(Debug, Clone)]
struct UpUnit {
    up: ConvTranspose3d,
    norm: Norm,
    relu: Relu,
}

impl UpUnit {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.up.forward(x, mode);
        let y = self.norm.forward(&y, mode);
        self.relu.forward(y, mode)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        let g = self.norm.backward(&g);
        self.up.backward(&g)
    }
}

#[derive(Debug, Clone)]
struct Stage(Vec<ConvUnit>);

impl Stage {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut h = self.0[0].forward(x, mode);
        for unit in &mut self.0[1..] {
            h = unit.forward(&h, mode);
        }
        h
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        self.0.iter_mut().rev().fold(grad, |g, unit| unit.backward(g))
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, u) in self.0.iter().enumerate() {
            u.params(&join(prefix, &i.to_string()), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, u) in self.0.iter_mut().enumerate() {
            u.params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// V-Net style encoder-decoder: 3x3x3 convolution stages, strided 2x2x2
/// convolutions for downsampling, 2x2x2 transposed convolutions for
/// upsampling and additive skip connections at every level.
#[derive(Debug, Clone)]
pub struct VNet {
    config: BackboneConfig,
    encoders: Vec<Stage>,
    downs: Vec<ConvUnit>,
    ups: Vec<UpUnit>,
    decoders: Vec<Stage>,
}

impl VNet {
    pub fn new(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let norm = config.normalization;
        let stage = |rng: &mut ChaCha8Rng, level: usize, in_c: usize, out_c: usize| {
            let width = config.width(level);
            let n = config.convs(level);
            Stage(
                (0..n)
                    .map(|i| {
                        let cin = if i == 0 { in_c } else { width };
                        let cout = if i + 1 == n { out_c } else { width };
                        ConvUnit::new(Conv3d::new(cin, cout, 3, 1, 1, rng), norm)
                    })
                    .collect(),
            )
        };
        let depth = config.depth;
        let mut encoders = Vec::with_capacity(depth);
        let mut downs = Vec::with_capacity(depth - 1);
        for level in 0..depth {
            let in_c = if level == 0 {
                config.in_channels
            } else {
                config.width(level)
            };
            encoders.push(stage(rng, level, in_c, config.width(level)));
            if level + 1 < depth {
                let down = Conv3d::new(config.width(level), config.width(level + 1), 2, 2, 0, rng);
                downs.push(ConvUnit::new(down, norm));
            }
        }
        let mut ups = Vec::with_capacity(depth - 1);
        let mut decoders = Vec::with_capacity(depth - 1);
        for level in 0..depth - 1 {
            let up = ConvTranspose3d::new(config.width(level + 1), config.width(level), 2, rng);
            ups.push(UpUnit {
                norm: Norm::new(norm, config.width(level)),
                up,
                relu: Relu::default(),
            });
            let out_c = if level == 0 {
                config.feature_channels
            } else {
                config.width(level)
            };
            decoders.push(stage(rng, level, config.width(level), out_c));
        }
        Ok(Self {
            config: config.clone(),
            encoders,
            downs,
            ups,
            decoders,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }
}

impl Backbone for VNet {
    fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    fn batch_statistics(&self) -> bool {
        self.config.normalization == NormKind::Batch
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        if input.c != self.config.in_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.config.in_channels,
                found: input.c,
            });
        }
        self.config.check_input(input.spatial)
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = self.encoders[0].forward(x, mode);
        for level in 1..depth {
            let down = self.downs[level - 1].forward(&h, mode);
            skips.push(h);
            h = self.encoders[level].forward(&down, mode);
        }
        for level in (0..depth - 1).rev() {
            let mut up = self.ups[level].forward(&h, mode);
            up.add_assign(&skips[level]);
            h = self.decoders[level].forward(&up, mode);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) {
        let depth = self.config.depth;
        let mut skip_grads = Vec::with_capacity(depth - 1);
        let mut g = grad.clone();
        for level in 0..depth - 1 {
            let g_sum = self.decoders[level].backward(g);
            skip_grads.push(g_sum.clone());
            g = self.ups[level].backward(g_sum);
        }
        for level in (1..depth).rev() {
            let g_in = self.encoders[level].backward(g);
            let mut g_skip = self.downs[level - 1].backward(g_in);
            g_skip.add_assign(&skip_grads[level - 1]);
            g = g_skip;
        }
        self.encoders[0].backward(g);
    }
}

impl Parameters for VNet {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (l, s) in self.encoders.iter().enumerate() {
            s.params(&join(prefix, &format!("enc{l}")), out);
        }
        for (l, d) in self.downs.iter().enumerate() {
            d.params(&join(prefix, &format!("down{l}")), out);
        }
        for (l, u) in self.ups.iter().enumerate() {
            let p = join(prefix, &format!("up{l}"));
            u.up.params(&join(&p, "conv"), out);
            u.norm.params(&join(&p, "norm"), out);
        }
        for (l, s) in self.decoders.iter().enumerate() {
            s.params(&join(prefix, &format!("dec{l}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (l, s) in self.encoders.iter_mut().enumerate() {
            s.params_mut(&join(prefix, &format!("enc{l}")), out);
        }
        for (l, d) in self.downs.iter_mut().enumerate() {
            d.params_mut(&join(prefix, &format!("down{l}")), out);
        }
        for (l, u) in self.ups.iter_mut().enumerate() {
            let p = join(prefix, &format!("up{l}"));
            u.up.params_mut(&join(&p, "conv"), out);
            u.norm.params_mut(&join(&p, "norm"), out);
        }
        for (l, s) in self.decoders.iter_mut().enumerate() {
            s.params_mut(&join(prefix, &format!("dec{l}")), out);
        }
    }
}

/// Probability outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub features: Tensor,
    pub seg: Tensor,
    pub boundary: Option<Tensor>,
}

/// Trunk plus a segmentation head and an optional boundary head.
#[derive(Debug, Clone)]
pub struct DualHeadModel<B: Backbone = VNet> {
    class_count: usize,
    trunk: B,
    seg_head: Conv3d,
    boundary_head: Option<Conv3d>,
    probs: Option<(Tensor, Option<Tensor>)>,
}

pub const SEG_HEAD: &str = "seg_head";
pub const BOUNDARY_HEAD: &str = "boundary_head";

fn head(channels: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Conv3d {
    Conv3d::new(channels, class_count, 1, 1, 0, rng).with_linear_gain()
}

/// Build a V-Net dual-head model with deterministic initialisation.
pub fn build_model(config: &BackboneConfig, class_count: usize, seed: u64) -> Result<DualHeadModel, ModelError> {
    build_model_with_heads(config, class_count, seed, true)
}

/// As [`build_model`]; `boundary_head = false` gives a single-head model.
pub fn build_model_with_heads(
    config: &BackboneConfig,
    class_count: usize,
    seed: u64,
    boundary_head: bool,
) -> Result<DualHeadModel, ModelError> {
    if class_count == 0 {
        return Err(ModelError::InvalidConfig("class count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = VNet::new(config, &mut rng)?;
    Ok(DualHeadModel::with_trunk(trunk, class_count, boundary_head, &mut rng))
}

impl<B: Backbone> DualHeadModel<B> {
    /// Attach fresh heads to any trunk.
    pub fn with_trunk(trunk: B, class_count: usize, boundary_head: bool, rng: &mut ChaCha8Rng) -> Self {
        let c = trunk.feature_channels();
        let seg_head = head(c, class_count, rng);
        let boundary_head = boundary_head.then(|| head(c, class_count, rng));
        Self {
            class_count,
            trunk,
            seg_head,
            boundary_head,
            probs: None,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn has_boundary_head(&self) -> bool {
        self.boundary_head.is_some()
    }

    pub fn trunk(&self) -> &B {
        &self.trunk
    }

    pub fn seg_head_mut(&mut self) -> &mut Conv3d {
        &mut self.seg_head
    }

    pub fn boundary_head_mut(&mut self) -> Option<&mut Conv3d> {
        self.boundary_head.as_mut()
    }

    /// Zero both heads, so every output probability is exactly 0.5 (K = 1).
    pub fn zero_heads(&mut self) {
        for h in std::iter::once(&mut self.seg_head).chain(self.boundary_head.as_mut()) {
            h.weight.value.iter_mut().for_each(|w| *w = 0.0);
            h.bias.value.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ModelOutput, ModelError> {
        self.trunk.check_input(x)?;
        let features = self.trunk.forward(x, mode);
        let seg = nn::activate(&self.seg_head.forward(&features, mode));
        let boundary = self
            .boundary_head
            .as_mut()
            .map(|h| nn::activate(&h.forward(&features, mode)));
        self.probs = (mode == Mode::Train).then(|| (seg.clone(), boundary.clone()));
        Ok(ModelOutput {
            features,
            seg,
            boundary,
        })
    }

    /// Back-propagate gradients of a loss with respect to the head
    /// probabilities. A `None` boundary gradient leaves the boundary head
    /// out of the backward pass entirely.
    pub fn backward(&mut self, grad_seg: &Tensor, grad_boundary: Option<&Tensor>) {
        let (seg_p, bnd_p) = self.probs.take().expect("backward without training forward");
        let mut g_feat = self.seg_head.backward(&nn::activate_backward(&seg_p, grad_seg));
        if let Some(head) = self.boundary_head.as_mut() {
            match (grad_boundary, bnd_p) {
                (Some(g), Some(p)) => g_feat.add_assign(&head.backward(&nn::activate_backward(&p, g))),
                _ => head.clear_cache(),
            }
        }
        self.trunk.backward(&g_feat);
    }

    pub fn zero_grad(&mut self) {
        let mut params = Vec::new();
        self.params_mut("", &mut params);
        for (_, p) in params {
            p.zero_grad();
        }
    }

    /// Named parameters and buffers, trunk first.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    /// Predict a single image in evaluation mode.
    pub fn predict(&mut self, image: &ImageVolume) -> Result<Prediction, ModelError> {
        let s = image.shape();
        let x = Tensor::from_vec(1, 1, s, image.as_slice().to_vec());
        let out = self.forward(&x, Mode::Eval)?;
        let maps = |t: &Tensor| {
            (0..t.c)
                .map(|c| ProbabilityMap::new(s, t.channel(0, c).to_vec()).expect("activated outputs lie in [0, 1]"))
                .collect::<Vec<_>>()
        };
        Ok(Prediction {
            features: FeatureVolume {
                channels: out.features.c,
                shape: s,
                data: out.features.data,
            },
            seg: maps(&out.seg),
            boundary: out.boundary.as_ref().map(maps),
        })
    }
}

impl<B: Backbone> Parameters for DualHeadModel<B> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.trunk.params(&join(prefix, "trunk"), out);
        self.seg_head.params(&join(prefix, SEG_HEAD), out);
        if let Some(h) = &self.boundary_head {
            h.params(&join(prefix, BOUNDARY_HEAD), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.trunk.params_mut(&join(prefix, "trunk"), out);
        self.seg_head.params_mut(&join(prefix, SEG_HEAD), out);
        if let Some(h) = &mut self.boundary_head {
            h.params_mut(&join(prefix, BOUNDARY_HEAD), out);
        }
    }
}

/// Single-image output: one probability map per class and head.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub features: FeatureVolume,
    pub seg: Vec<ProbabilityMap>,
    pub boundary: Option<Vec<ProbabilityMap>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub class_count: usize,
    pub boundary_head: bool,
}

impl DualHeadModel<VNet> {
    pub fn metadata(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            backbone: self.trunk.config().clone(),
            class_count: self.class_count,
            boundary_head: self.has_boundary_head(),
        }
    }

    /// Serialise parameters and buffers as a safetensors archive; the
    /// model configuration travels in the archive metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let params = self.named_params();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
            .iter()
            .map(|(name, p)| {
                let raw = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), p.shape.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| ModelError::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let meta = serde_json::to_string(&self.metadata()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let info = Some(HashMap::from([(METADATA_KEY.to_string(), meta)]));
        safetensors::serialize(views, &info).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let err = |e: &dyn std::fmt::Display| ModelError::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| err(&e))?;
        let raw_meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| ModelError::Checkpoint("missing model metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw_meta).map_err(|e| err(&e))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                meta.format_version
            )));
        }
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| err(&e))?;
        let mut model = build_model_with_heads(&meta.backbone, meta.class_count, 0, meta.boundary_head)?;
        let expected = model.named_params().len();
        if tensors.len() != expected {
            return Err(ModelError::Checkpoint(format!(
                "archive holds {} tensors, model expects {expected}",
                tensors.len()
            )));
        }
        for (name, p) in model.named_params_mut() {
            let view = tensors
                .tensor(&name)
                .map_err(|_| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: expected f32 {:?}, found {:?} {:?}",
                    p.shape,
                    view.dtype(),
                    view.shape()
                )));
            }
            for (v, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Sgd;
    use std::collections::BTreeMap;

    fn small() -> BackboneConfig {
        BackboneConfig {
            depth: 3,
            base_width: 4,
            feature_channels: 6,
            ..BackboneConfig::default()
        }
    }

    fn input(n: usize, s: Shape3, seed: u64) -> Tensor {
        crate::nn::testutil::random_tensor(n, 1, s, seed)
    }

    #[test]
    fn shape_contract_on_32_cube() {
        let cfg = BackboneConfig {
            depth: 3,
            base_width: 8,
            feature_channels: 16,
            ..BackboneConfig::default()
        };
        let mut m = build_model(&cfg, 1, 0).unwrap();
        let out = m.forward(&input(1, Shape3::cube(32), 1), Mode::Eval).unwrap();
        assert_eq!((out.features.c, out.features.spatial), (16, Shape3::cube(32)));
        assert_eq!((out.seg.c, out.seg.spatial), (1, Shape3::cube(32)));
        assert_eq!(out.boundary.unwrap().spatial, Shape3::cube(32));
    }

    #[test]
    fn zero_heads_give_one_half() {
        let mut m = build_model(&small(), 1, 3).unwrap();
        m.zero_heads();
        let out = m.forward(&input(2, Shape3::cube(8), 2), Mode::Train).unwrap();
        assert!(out.seg.data.iter().all(|&p| p == 0.5));
        assert!(out.boundary.unwrap().data.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn class_counts_and_softmax() {
        let mut m1 = build_model(&small(), 1, 0).unwrap();
        assert_eq!(m1.forward(&input(1, Shape3::cube(8), 0), Mode::Eval).unwrap().seg.c, 1);
        let mut m3 = build_model(&small(), 3, 0).unwrap();
        let out = m3.forward(&input(1, Shape3::cube(8), 0), Mode::Eval).unwrap();
        assert_eq!(out.seg.c, 3);
        let s = out.seg.spatial.len();
        for probs in [&out.seg, out.boundary.as_ref().unwrap()] {
            for v in 0..s {
                let sum: f32 = (0..3).map(|c| probs.data[c * s + v]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
            assert!(probs.data.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn incompatible_shapes_name_the_axis() {
        let mut m = build_model(&small(), 1, 0).unwrap();
        let err = m.forward(&input(1, Shape3::new(8, 6, 8), 0), Mode::Eval).unwrap_err();
        assert!(matches!(
            err,
            ModelError::IncompatibleShape {
                axis: "W",
                size: 6,
                divisor: 4
            }
        ));
        let x = Tensor::zeros(1, 2, Shape3::cube(8));
        assert!(matches!(
            m.forward(&x, Mode::Eval),
            Err(ModelError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = BackboneConfig { depth: 1, ..small() };
        assert!(build_model(&bad, 1, 0).is_err());
        let bad = BackboneConfig {
            feature_channels: 0,
            ..small()
        };
        assert!(build_model(&bad, 1, 0).is_err());
        assert!(build_model(&small(), 0, 0).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let mut m = build_model(&small(), 1, 42).unwrap();
        let x = input(1, Shape3::cube(8), 5);
        let a = m.forward(&x, Mode::Eval).unwrap();
        let b = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.seg.data, b.seg.data);
        assert_eq!(a.boundary.unwrap().data, b.boundary.unwrap().data);
        let again = build_model(&small(), 1, 42).unwrap();
        assert_eq!(again.named_params(), m.named_params());
    }

    #[test]
    fn every_trunk_layer_receives_gradient() {
        let mut m = build_model(&small(), 1, 9).unwrap();
        let x = input(2, Shape3::cube(8), 4);
        let out = m.forward(&x, Mode::Train).unwrap();
        let ones = Tensor::from_vec(out.seg.n, 1, out.seg.spatial, vec![1.0; out.seg.data.len()]);
        m.backward(&ones, Some(&ones));
        let mut by_layer: BTreeMap<String, bool> = BTreeMap::new();
        for (name, p) in m.named_params() {
            if !p.trainable || !name.starts_with("trunk") {
                continue;
            }
            let layer = name.rsplit_once('.').unwrap().0.to_string();
            let nonzero = p.grad.iter().any(|g| *g != 0.0);
            *by_layer.entry(layer).or_default() |= nonzero;
        }
        assert!(by_layer.len() > 10);
        for (layer, ok) in by_layer {
            assert!(ok, "no gradient reached {layer}");
        }
    }

    #[test]
    fn heads_are_independent() {
        let mut m = build_model(&small(), 1, 1).unwrap();
        let x = input(1, Shape3::cube(8), 8);
        let before = m.forward(&x, Mode::Eval).unwrap();
        m.boundary_head_mut().unwrap().weight.value[0] += 1.0;
        let after = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before.seg.data, after.seg.data);
        assert_ne!(
            before.boundary.as_ref().unwrap().data,
            after.boundary.as_ref().unwrap().data
        );
        m.seg_head_mut().weight.value[0] += 1.0;
        let last = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(after.boundary.unwrap().data, last.boundary.unwrap().data);
    }

    /// Directional finite difference along the trunk part of the analytic
    /// gradient; single-coordinate probes are too noisy in f32 with ReLU kinks.
    #[test]
    fn trunk_gradient_matches_directional_difference() {
        for norm in [NormKind::Instance, NormKind::Batch] {
            let cfg = BackboneConfig {
                normalization: norm,
                ..small()
            };
            let mut m = build_model(&cfg, 1, 11).unwrap();
            let x = input(2, Shape3::cube(8), 6);
            // batch statistics keep the objective a function of the weights alone
            let objective = |m: &mut DualHeadModel| {
                let out = m.forward(&x, Mode::Train).unwrap();
                m.probs = None;
                out.seg.data.iter().map(|&v| v as f64).sum::<f64>()
                    + 2.0 * out.boundary.unwrap().data.iter().map(|&v| v as f64).sum::<f64>()
            };
            let out = m.forward(&x, Mode::Train).unwrap();
            let ones = Tensor::from_vec(2, 1, out.seg.spatial, vec![1.0; out.seg.data.len()]);
            let twos = Tensor::from_vec(2, 1, out.seg.spatial, vec![2.0; out.seg.data.len()]);
            m.backward(&ones, Some(&twos));
            let direction: Vec<Vec<f32>> = m
                .named_params()
                .iter()
                .map(|(n, p)| {
                    if p.trainable && n.starts_with("trunk") {
                        p.grad.clone()
                    } else {
                        vec![0.0; p.grad.len()]
                    }
                })
                .collect();
            let norm_sq: f64 = direction.iter().flatten().map(|g| (*g as f64).powi(2)).sum();
            let h = 1e-3;
            let step = (h / norm_sq.sqrt()) as f32;
            let bump = |sign: f32, m: &mut DualHeadModel| {
                for ((_, p), d) in m.named_params_mut().into_iter().zip(&direction) {
                    for (v, g) in p.value.iter_mut().zip(d) {
                        *v += sign * step * g;
                    }
                }
            };
            bump(1.0, &mut m);
            let fp = objective(&mut m);
            bump(-2.0, &mut m);
            let fm = objective(&mut m);
            let fd = (fp - fm) / (2.0 * h);
            let expected = norm_sq.sqrt();
            assert!(
                (fd - expected).abs() < 1e-2 * expected,
                "{norm:?}: fd {fd} vs {expected}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut m = build_model(&small(), 1, 21).unwrap();
        // move the running statistics away from their initial values
        let x = input(2, Shape3::cube(8), 3);
        let out = m.forward(&x, Mode::Train).unwrap();
        let g = Tensor::from_vec(2, 1, out.seg.spatial, vec![0.1; out.seg.data.len()]);
        m.backward(&g, Some(&g));
        Sgd::default().step(m.named_params_mut(), |_| false);

        let bytes = m.to_bytes().unwrap();
        let mut loaded = DualHeadModel::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.metadata(), m.metadata());
        for ((na, a), (nb, b)) in m.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(a.value, b.value);
        }
        let x = input(1, Shape3::cube(8), 7);
        assert_eq!(
            m.forward(&x, Mode::Eval).unwrap().seg.data,
            loaded.forward(&x, Mode::Eval).unwrap().seg.data
        );
        assert_eq!(bytes, loaded.to_bytes().unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage_and_wrong_version() {
        assert!(DualHeadModel::from_bytes(b"not a checkpoint").is_err());
        let m = build_model_with_heads(&small(), 1, 0, false).unwrap();
        let bytes = m.to_bytes().unwrap();
        let key = b"format_version\\\":";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len();
        let mut tampered = bytes.clone();
        tampered[at] = b'9';
        assert!(matches!(
            DualHeadModel::from_bytes(&tampered),
            Err(ModelError::Checkpoint(msg)) if msg.contains("version")
        ));
        let single = DualHeadModel::from_bytes(&bytes).unwrap();
        assert!(!single.has_boundary_head());
    }
}
