use super::{join, Mode, Param, Parameters, Tensor};
use crate::volume::Shape3;
use rand::Rng;

/// Upper bound on im2col buffer size (in floats) before the output is
/// processed in slabs of whole H-rows.
const COL_BUDGET: usize = 1 << 18;

/// `C = A·B + beta·C` over strided views, bounds-checked before the call.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched lies inside the slices checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: Shape3,
    output: Shape3,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.k * self.k * self.k
    }

    /// Map output coordinate `o` with kernel offset `t` to an input
    /// coordinate along an axis of length `n`.
    #[inline]
    fn source(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    /// Range of output `d` indices whose source is inside the input for a
    /// stride-1 convolution with depth offset `t`.
    fn valid_d(&self, t: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(t);
        let hi = (self.input.d + self.pad).saturating_sub(t).min(self.output.d);
        (lo.min(hi), hi)
    }

    /// Visit every (column row, output slab offset, input offset or None)
    /// for output rows `h0..h1`, one contiguous D-run at a time.
    fn for_each_run(&self, h0: usize, h1: usize, mut f: impl FnMut(usize, usize, Run)) {
        let (k, out, inp) = (self.k, self.output, self.input);
        let in_len = inp.len();
        for ci in 0..self.in_c {
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let row = ((ci * k + a) * k + b) * k + c;
                        let mut o = 0;
                        for oh in h0..h1 {
                            let ih = self.source(oh, a, inp.h);
                            for ow in 0..out.w {
                                let iw = self.source(ow, b, inp.w);
                                let run = match (ih, iw) {
                                    (Some(ih), Some(iw)) => Run::Line {
                                        base: ci * in_len + (ih * inp.w + iw) * inp.d,
                                        t: c,
                                    },
                                    _ => Run::Zero,
                                };
                                f(row, o, run);
                                o += out.d;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Run {
    Zero,
    Line { base: usize, t: usize },
}

fn im2col(g: &Geometry, x: &[f32], h0: usize, h1: usize, cols: &mut [f32]) {
    let p_len = (h1 - h0) * g.output.w * g.output.d;
    let od = g.output.d;
    g.for_each_run(h0, h1, |row, o, run| {
        let dst = &mut cols[row * p_len + o..row * p_len + o + od];
        match run {
            Run::Zero => dst.fill(0.0),
            Run::Line { base, t } if g.stride == 1 => {
                let (lo, hi) = g.valid_d(t);
                dst[..lo].fill(0.0);
                let src = base + lo + t - g.pad;
                dst[lo..hi].copy_from_slice(&x[src..src + hi - lo]);
                dst[hi..].fill(0.0);
            }
            Run::Line { base, t } => {
                for (d, v) in dst.iter_mut().enumerate() {
                    *v = g.source(d, t, g.input.d).map_or(0.0, |id| x[base + id]);
                }
            }
        }
    });
}

fn col2im(g: &Geometry, cols: &[f32], h0: usize, h1: usize, dx: &mut [f32]) {
    let p_len = (h1 - h0) * g.output.w * g.output.d;
    let od = g.output.d;
    g.for_each_run(h0, h1, |row, o, run| {
        let src = &cols[row * p_len + o..row * p_len + o + od];
        match run {
            Run::Zero => {}
            Run::Line { base, t } if g.stride == 1 => {
                let (lo, hi) = g.valid_d(t);
                let dst = base + lo + t - g.pad;
                for (acc, v) in dx[dst..dst + hi - lo].iter_mut().zip(&src[lo..hi]) {
                    *acc += v;
                }
            }
            Run::Line { base, t } => {
                for (d, v) in src.iter().enumerate() {
                    if let Some(id) = g.source(d, t, g.input.d) {
                        dx[base + id] += v;
                    }
                }
            }
        }
    });
}

/// Cubic 3D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv3d {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv3d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * k * k * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::he_normal(vec![out_c, in_c, k, k, k], fan_in, rng),
            bias: Param::filled(vec![out_c], 0.0),
            input: None,
        }
    }

    /// Scale the weights so the layer behaves as a linear read-out rather
    /// than a rectified layer (unit gain instead of He gain).
    pub fn with_linear_gain(mut self) -> Self {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        self.weight.value.iter_mut().for_each(|w| *w *= s);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    /// Drop the input cached by a training-mode forward pass.
    pub fn clear_cache(&mut self) {
        self.input = None;
    }

    pub fn output_shape(&self, input: Shape3) -> Option<Shape3> {
        let dim = |n: usize| {
            let padded = n + 2 * self.pad;
            (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
        };
        Some(Shape3::new(dim(input.h)?, dim(input.w)?, dim(input.d)?))
    }

    fn geometry(&self, input: Shape3) -> Geometry {
        Geometry {
            in_c: self.in_c,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            input,
            output: self.output_shape(input).expect("input smaller than kernel"),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn slab_rows(&self, g: &Geometry) -> usize {
        let per_row = g.rows() * g.output.w * g.output.d;
        (COL_BUDGET / per_row.max(1)).clamp(1, g.output.h)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let g = self.geometry(x.spatial);
        let out_len = g.output.len();
        let mut y = Tensor::zeros(x.n, self.out_c, g.output);
        let rows = g.rows();
        let mut cols = Vec::new();
        for n in 0..x.n {
            let xi = x.item(n);
            let yi = y.item_mut(n);
            if self.is_pointwise() {
                gemm(
                    self.out_c,
                    rows,
                    out_len,
                    &self.weight.value,
                    (rows, 1),
                    xi,
                    (out_len, 1),
                    0.0,
                    yi,
                    (out_len, 1),
                );
            } else {
                let slab = self.slab_rows(&g);
                let plane = g.output.w * g.output.d;
                let mut h0 = 0;
                while h0 < g.output.h {
                    let h1 = (h0 + slab).min(g.output.h);
                    let p_len = (h1 - h0) * plane;
                    cols.resize(rows * p_len, 0.0);
                    im2col(&g, xi, h0, h1, &mut cols);
                    gemm(
                        self.out_c,
                        rows,
                        p_len,
                        &self.weight.value,
                        (rows, 1),
                        &cols,
                        (p_len, 1),
                        0.0,
                        &mut yi[h0 * plane..],
                        (out_len, 1),
                    );
                    h0 = h1;
                }
            }
            for (co, &b) in self.bias.value.iter().enumerate() {
                yi[co * out_len..(co + 1) * out_len].iter_mut().for_each(|v| *v += b);
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without training forward");
        let g = self.geometry(x.spatial);
        assert_eq!(grad.spatial, g.output);
        let out_len = g.output.len();
        let rows = g.rows();
        let mut dx = Tensor::zeros(x.n, self.in_c, x.spatial);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for n in 0..x.n {
            let gi = grad.item(n);
            for co in 0..self.out_c {
                self.bias.grad[co] += gi[co * out_len..(co + 1) * out_len].iter().sum::<f32>();
            }
            let xi = x.item(n);
            if self.is_pointwise() {
                gemm(
                    self.out_c,
                    out_len,
                    rows,
                    gi,
                    (out_len, 1),
                    xi,
                    (1, out_len),
                    1.0,
                    &mut self.weight.grad,
                    (rows, 1),
                );
                gemm(
                    rows,
                    self.out_c,
                    out_len,
                    &self.weight.value,
                    (1, rows),
                    gi,
                    (out_len, 1),
                    0.0,
                    dx.item_mut(n),
                    (out_len, 1),
                );
                continue;
            }
            let slab = self.slab_rows(&g);
            let plane = g.output.w * g.output.d;
            let mut h0 = 0;
            while h0 < g.output.h {
                let h1 = (h0 + slab).min(g.output.h);
                let p_len = (h1 - h0) * plane;
                let g_slab = &gi[h0 * plane..];
                cols.resize(rows * p_len, 0.0);
                im2col(&g, xi, h0, h1, &mut cols);
                gemm(
                    self.out_c,
                    p_len,
                    rows,
                    g_slab,
                    (out_len, 1),
                    &cols,
                    (1, p_len),
                    1.0,
                    &mut self.weight.grad,
                    (rows, 1),
                );
                dcols.resize(rows * p_len, 0.0);
                gemm(
                    rows,
                    self.out_c,
                    p_len,
                    &self.weight.value,
                    (1, rows),
                    g_slab,
                    (out_len, 1),
                    0.0,
                    &mut dcols,
                    (p_len, 1),
                );
                col2im(&g, &dcols, h0, h1, dx.item_mut(n));
                h0 = h1;
            }
        }
        dx
    }
}

impl Parameters for Conv3d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Transposed convolution whose kernel equals its stride, so output
/// windows never overlap (the usual 2x learned upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    in_c: usize,
    out_c: usize,
    k: usize,
    /// Layout `[in_c, out_c, k, k, k]`.
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_c,
            out_c,
            k,
            weight: Param::he_normal(vec![in_c, out_c, k, k, k], in_c, rng),
            bias: Param::filled(vec![out_c], 0.0),
            input: None,
        }
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn scatter_index(&self, s_in: Shape3, s_out: Shape3, col: usize, pos: usize) -> usize {
        let k = self.k;
        let taps = self.taps();
        let co = col / taps;
        let t = col % taps;
        let (a, b, c) = (t / (k * k), (t / k) % k, t % k);
        let (i, j, l) = s_in.coords(pos);
        co * s_out.len() + s_out.index(i * k + a, j * k + b, l * k + c)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.in_c, "transposed conv input channels");
        let k = self.k;
        let s_in = x.spatial;
        let s_out = Shape3::new(s_in.h * k, s_in.w * k, s_in.d * k);
        let n_in = s_in.len();
        let cols = self.out_c * self.taps();
        let mut y = Tensor::zeros(x.n, self.out_c, s_out);
        let mut buf = vec![0.0f32; cols * n_in];
        for n in 0..x.n {
            gemm(
                cols,
                self.in_c,
                n_in,
                &self.weight.value,
                (1, cols),
                x.item(n),
                (n_in, 1),
                0.0,
                &mut buf,
                (n_in, 1),
            );
            let yi = y.item_mut(n);
            for col in 0..cols {
                let b = self.bias.value[col / self.taps()];
                for pos in 0..n_in {
                    yi[self.scatter_index(s_in, s_out, col, pos)] = buf[col * n_in + pos] + b;
                }
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self
            .input
            .take()
            .expect("transposed conv backward without training forward");
        let s_in = x.spatial;
        let s_out = grad.spatial;
        let n_in = s_in.len();
        let cols = self.out_c * self.taps();
        let mut dx = Tensor::zeros(x.n, self.in_c, s_in);
        let mut buf = vec![0.0f32; cols * n_in];
        for n in 0..x.n {
            let gi = grad.item(n);
            for col in 0..cols {
                let co = col / self.taps();
                let mut acc = 0.0f32;
                for pos in 0..n_in {
                    let v = gi[self.scatter_index(s_in, s_out, col, pos)];
                    buf[col * n_in + pos] = v;
                    acc += v;
                }
                self.bias.grad[co] += acc;
            }
            gemm(
                self.in_c,
                n_in,
                cols,
                x.item(n),
                (n_in, 1),
                &buf,
                (1, n_in),
                1.0,
                &mut self.weight.grad,
                (cols, 1),
            );
            gemm(
                self.in_c,
                cols,
                n_in,
                &self.weight.value,
                (cols, 1),
                &buf,
                (n_in, 1),
                0.0,
                dx.item_mut(n),
                (n_in, 1),
            );
        }
        dx
    }
}

impl Parameters for ConvTranspose3d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
