//! Minimal CPU tensor engine for 3D convolutional networks.
//!
//! Layers cache what they need during a training-mode forward pass and
//! accumulate parameter gradients on `backward`. Tensors are dense
//! `N x C x H x W x D` buffers of `f32`.

mod conv;
mod norm;
mod optim;

pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::{BatchNorm3d, InstanceNorm3d, Norm, NormKind};
pub use optim::Sgd;

use crate::volume::Shape3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Training mode caches activations and uses batch statistics; evaluation
/// mode uses running statistics and caches nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub spatial: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, spatial: Shape3) -> Self {
        Self {
            n,
            c,
            spatial,
            data: vec![0.0; n * c * spatial.len()],
        }
    }

    pub fn from_vec(n: usize, c: usize, spatial: Shape3, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * spatial.len(), "tensor buffer length");
        Self { n, c, spatial, data }
    }

    pub fn item_len(&self) -> usize {
        self.c * self.spatial.len()
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let s = self.spatial.len();
        let off = (n * self.c + c) * s;
        &self.data[off..off + s]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.n == other.n && self.c == other.c && self.spatial == other.spatial
    }

    /// Stack single-item tensors along the batch axis.
    pub fn concat(items: &[&Tensor]) -> Tensor {
        let first = items.first().expect("at least one tensor");
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in items {
            assert!(t.c == first.c && t.spatial == first.spatial, "concat shape mismatch");
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Tensor::from_vec(n, first.c, first.spatial, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A named tensor of weights (or, when not trainable, a running buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            shape,
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            trainable: true,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn buffer(shape: Vec<usize>, v: f32) -> Self {
        Self {
            trainable: false,
            ..Self::filled(shape, v)
        }
    }

    /// He-normal initialisation with the given fan-in.
    pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Self::new(shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Collects `(path, parameter)` pairs under a dotted prefix.
pub trait Parameters {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Rectified linear unit, caching its output for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    output: Option<Vec<f32>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, mode: Mode) -> Tensor {
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.output = (mode == Mode::Train).then(|| x.data.clone());
        x
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let out = self.output.take().expect("relu backward without training forward");
        for (g, y) in grad.data.iter_mut().zip(&out) {
            if *y <= 0.0 {
                *g = 0.0;
            }
        }
        grad
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability activation of a head: sigmoid for one channel, channel-wise
/// softmax otherwise.
pub fn activate(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    if logits.c == 1 {
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        return out;
    }
    let s = logits.spatial.len();
    for n in 0..logits.n {
        let item = out.item_mut(n);
        for v in 0..s {
            let max = (0..logits.c).map(|c| item[c * s + v]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..logits.c {
                let e = (item[c * s + v] - max).exp();
                item[c * s + v] = e;
                sum += e;
            }
            for c in 0..logits.c {
                item[c * s + v] /= sum;
            }
        }
    }
    out
}

/// Back-propagate a gradient through [`activate`] given its output.
pub fn activate_backward(probs: &Tensor, grad: &Tensor) -> Tensor {
    assert!(probs.same_shape(grad));
    let mut out = grad.clone();
    if probs.c == 1 {
        for ((g, &p), &dy) in out.data.iter_mut().zip(&probs.data).zip(&grad.data) {
            *g = dy * p * (1.0 - p);
        }
        return out;
    }
    let s = probs.spatial.len();
    for n in 0..probs.n {
        let p = probs.item(n);
        let dy = grad.item(n);
        let o = out.item_mut(n);
        for v in 0..s {
            let dot: f32 = (0..probs.c).map(|c| p[c * s + v] * dy[c * s + v]).sum();
            for c in 0..probs.c {
                o[c * s + v] = p[c * s + v] * (dy[c * s + v] - dot);
            }
        }
    }
    out
}
