use super::{join, Mode, Param, Parameters, Tensor};
use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-5;

/// Batch normalisation over `(N, H, W, D)` per channel, with running
/// statistics for evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f64,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f64>,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], 0.0),
            running_var: Param::buffer(vec![channels], 1.0),
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let c_count = x.c;
        let s = x.spatial.len();
        let m = (x.n * s) as f64;
        let mut y = x.clone();
        match mode {
            Mode::Eval => {
                for c in 0..c_count {
                    let mean = self.running_mean.value[c] as f64;
                    let inv = 1.0 / (self.running_var.value[c] as f64 + EPS).sqrt();
                    let (g, b) = (self.gamma.value[c] as f64, self.beta.value[c] as f64);
                    for n in 0..x.n {
                        let off = (n * c_count + c) * s;
                        for v in &mut y.data[off..off + s] {
                            *v = ((*v as f64 - mean) * inv * g + b) as f32;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let mut xhat = vec![0.0f32; x.data.len()];
                let mut inv_std = vec![0.0; c_count];
                for c in 0..c_count {
                    let chans = || (0..x.n).map(|n| x.channel(n, c));
                    let mean = chans().flat_map(|ch| ch.iter()).map(|&v| v as f64).sum::<f64>() / m;
                    let var = chans()
                        .flat_map(|ch| ch.iter())
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>()
                        / m;
                    let inv = 1.0 / (var + EPS).sqrt();
                    inv_std[c] = inv;
                    let (g, b) = (self.gamma.value[c] as f64, self.beta.value[c] as f64);
                    for n in 0..x.n {
                        let off = (n * c_count + c) * s;
                        for i in off..off + s {
                            let xh = (x.data[i] as f64 - mean) * inv;
                            xhat[i] = xh as f32;
                            y.data[i] = (xh * g + b) as f32;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let mo = self.momentum;
                    let rm = &mut self.running_mean.value[c];
                    *rm = ((1.0 - mo) * *rm as f64 + mo * mean) as f32;
                    let rv = &mut self.running_var.value[c];
                    *rv = ((1.0 - mo) * *rv as f64 + mo * unbiased) as f32;
                }
                self.cache = Some(NormCache { xhat, inv_std });
            }
        }
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward without training forward");
        let s = grad.spatial.len();
        let c_count = grad.c;
        let m = (grad.n * s) as f64;
        let mut dx = grad.clone();
        for c in 0..c_count {
            let idx = || (0..grad.n).flat_map(move |n| (n * c_count + c) * s..(n * c_count + c + 1) * s);
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for i in idx() {
                sum_dy += grad.data[i] as f64;
                sum_dy_xhat += grad.data[i] as f64 * cache.xhat[i] as f64;
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let scale = self.gamma.value[c] as f64 * cache.inv_std[c] / m;
            for i in idx() {
                let v = m * grad.data[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat;
                dx.data[i] = (scale * v) as f32;
            }
        }
        dx
    }
}

impl Parameters for BatchNorm3d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Instance normalisation over `(H, W, D)` per item and channel, with an
/// affine transform and no running statistics.
#[derive(Debug, Clone)]
pub struct InstanceNorm3d {
    pub gamma: Param,
    pub beta: Param,
    cache: Option<NormCache>,
}

impl InstanceNorm3d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let s = x.spatial.len();
        let m = s as f64;
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0; x.n * x.c];
        for n in 0..x.n {
            for c in 0..x.c {
                let off = (n * x.c + c) * s;
                let ch = &x.data[off..off + s];
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
                let inv = 1.0 / (var + EPS).sqrt();
                inv_std[n * x.c + c] = inv;
                let (g, b) = (self.gamma.value[c] as f64, self.beta.value[c] as f64);
                for i in off..off + s {
                    let xh = (x.data[i] as f64 - mean) * inv;
                    xhat[i] = xh as f32;
                    y.data[i] = (xh * g + b) as f32;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(NormCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self
            .cache
            .take()
            .expect("instance norm backward without training forward");
        let s = grad.spatial.len();
        let m = s as f64;
        let mut dx = grad.clone();
        for n in 0..grad.n {
            for c in 0..grad.c {
                let off = (n * grad.c + c) * s;
                let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                for i in off..off + s {
                    sum_dy += grad.data[i] as f64;
                    sum_dy_xhat += grad.data[i] as f64 * cache.xhat[i] as f64;
                }
                self.gamma.grad[c] += sum_dy_xhat as f32;
                self.beta.grad[c] += sum_dy as f32;
                let scale = self.gamma.value[c] as f64 * cache.inv_std[n * grad.c + c] / m;
                for i in off..off + s {
                    let v = m * grad.data[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat;
                    dx.data[i] = (scale * v) as f32;
                }
            }
        }
        dx
    }
}

impl Parameters for InstanceNorm3d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone)]
pub enum Norm {
    Batch(BatchNorm3d),
    Instance(InstanceNorm3d),
}

impl Norm {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        match kind {
            NormKind::Batch => Norm::Batch(BatchNorm3d::new(channels)),
            NormKind::Instance => Norm::Instance(InstanceNorm3d::new(channels)),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        match self {
            Norm::Batch(n) => n.forward(x, mode),
            Norm::Instance(n) => n.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Norm::Batch(n) => n.backward(grad),
            Norm::Instance(n) => n.backward(grad),
        }
    }
}

impl Parameters for Norm {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Norm::Batch(n) => n.params(prefix, out),
            Norm::Instance(n) => n.params(prefix, out),
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Norm::Batch(n) => n.params_mut(prefix, out),
            Norm::Instance(n) => n.params_mut(prefix, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::volume::Shape3;

    fn fd_check(norm: &mut Norm, x: &Tensor) {
        let y = norm.forward(x, Mode::Train);
        let w = random_tensor(y.n, y.c, y.spatial, 31);
        let dx = norm.backward(&w);
        let h = 1e-2f32;
        let eval = |norm: &mut Norm, x: &Tensor| {
            let y = norm.forward(x, Mode::Train);
            norm.backward(&y); // discard cache
            probe(&y, &w)
        };
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (eval(norm, &xp) - eval(norm, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 5e-3, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn batch_norm_gradient() {
        let x = random_tensor(2, 2, Shape3::new(2, 2, 3), 1);
        fd_check(&mut Norm::new(NormKind::Batch, 2), &x);
    }

    #[test]
    fn instance_norm_gradient() {
        let x = random_tensor(2, 2, Shape3::new(2, 2, 3), 2);
        fd_check(&mut Norm::new(NormKind::Instance, 2), &x);
    }

    #[test]
    fn batch_norm_normalises_and_tracks_running_stats() {
        let mut bn = BatchNorm3d::new(1);
        let x = Tensor::from_vec(2, 1, Shape3::new(1, 1, 2), vec![1.0, 3.0, 5.0, 7.0]);
        let y = bn.forward(&x, Mode::Train);
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.4).abs() < 1e-6);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-5);
        let e = bn.forward(&x, Mode::Eval);
        assert_ne!(e.data, y.data);
    }
}
