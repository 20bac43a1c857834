//! Minimal layers with hand-written backward passes.
//!
//! Every layer here is position-wise or a local stencil over a [`Volume`];
//! activations stay channel-last so the heavy lifting is one GEMM per layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Volume;

/// A flat trainable tensor with a logical shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gradients aligned with a module's [`Parameterized::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn concat(parts: Vec<Grads>) -> Grads {
        Grads(parts.into_iter().flat_map(|g| g.0).collect())
    }
}

pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grads(&self) -> Grads {
        Grads(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }
}

/// `c = beta * c + op(a) · op(b)` for row-major `op(a): m×k`, `op(b): k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe in-bounds row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-position affine map `[rows, in] -> [rows, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl Linear {
    /// He-uniform weights and zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        Self {
            weight: Param::uniform(&[input, output], bound, rng),
            bias: Param::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (i, o) = (self.input_dim(), self.output_dim());
        debug_assert_eq!(x.len(), rows * i);
        let mut out: Vec<f64> = (0..rows).flat_map(|_| self.bias.data.iter().copied()).collect();
        gemm(rows, i, o, x, false, &self.weight.data, false, &mut out, 1.0);
        out
    }

    /// Accumulates weight/bias gradients into `grads` (`[weight, bias]`) and
    /// returns the input gradient when asked.
    pub fn backward(
        &self,
        x: &[f64],
        rows: usize,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let (i, o) = (self.input_dim(), self.output_dim());
        gemm(i, rows, o, x, true, grad_out, false, &mut grads[0], 1.0);
        for row in grad_out.chunks_exact(o) {
            for (g, v) in grads[1].iter_mut().zip(row) {
                *g += v;
            }
        }
        want_input.then(|| {
            let mut gx = vec![0.0; rows * i];
            gemm(rows, o, i, grad_out, false, &self.weight.data, true, &mut gx, 0.0);
            gx
        })
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 3-D convolution over `(t, y, x)` with zero "same" padding and stride 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3d {
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    /// `[kt * ks * ks * in, out]`, offsets ordered `(dt, dy, dx, in)`.
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        temporal_kernel: usize,
        spatial_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if temporal_kernel.is_multiple_of(2) || spatial_kernel.is_multiple_of(2) {
            return Err(Error::range(format!(
                "convolution kernel must be odd, got {temporal_kernel}x{spatial_kernel}x{spatial_kernel}"
            )));
        }
        let fan_in = temporal_kernel * spatial_kernel * spatial_kernel * input;
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Ok(Self {
            temporal_kernel,
            spatial_kernel,
            weight: Param::uniform(&[fan_in, output], bound, rng),
            bias: Param::zeros(&[output]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0] / (self.temporal_kernel * self.spatial_kernel * self.spatial_kernel)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    fn im2col(&self, x: &Volume) -> Vec<f64> {
        let [w, h, d, c] = x.dims();
        let (kt, ks) = (self.temporal_kernel, self.spatial_kernel);
        let (pt, ps) = ((kt / 2) as isize, (ks / 2) as isize);
        let cols = kt * ks * ks * c;
        let mut col = vec![0.0; x.positions() * cols];
        let src = x.data();
        let mut row = 0;
        for t in 0..d as isize {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut off = 0;
                    for dt in 0..kt as isize {
                        let st = t + dt - pt;
                        for dy in 0..ks as isize {
                            let sy = y + dy - ps;
                            for dx in 0..ks as isize {
                                let sx = xx + dx - ps;
                                if st >= 0
                                    && st < d as isize
                                    && sy >= 0
                                    && sy < h as isize
                                    && sx >= 0
                                    && sx < w as isize
                                {
                                    let i = x.index(sx as usize, sy as usize, st as usize, 0);
                                    dst[off..off + c].copy_from_slice(&src[i..i + c]);
                                }
                                off += c;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], dims: [usize; 4]) -> Volume {
        let [w, h, d, c] = dims;
        let (kt, ks) = (self.temporal_kernel, self.spatial_kernel);
        let (pt, ps) = ((kt / 2) as isize, (ks / 2) as isize);
        let cols = kt * ks * ks * c;
        let mut out = Volume::zeros(dims);
        let mut row = 0;
        for t in 0..d as isize {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut off = 0;
                    for dt in 0..kt as isize {
                        let st = t + dt - pt;
                        for dy in 0..ks as isize {
                            let sy = y + dy - ps;
                            for dx in 0..ks as isize {
                                let sx = xx + dx - ps;
                                if st >= 0
                                    && st < d as isize
                                    && sy >= 0
                                    && sy < h as isize
                                    && sx >= 0
                                    && sx < w as isize
                                {
                                    let i = out.index(sx as usize, sy as usize, st as usize, 0);
                                    for (o, v) in out.data_mut()[i..i + c].iter_mut().zip(&src[off..off + c]) {
                                        *o += v;
                                    }
                                }
                                off += c;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Volume) -> Result<Volume> {
        if x.c() != self.input_dim() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.input_dim(),
                x.c()
            )));
        }
        let rows = x.positions();
        let o = self.output_dim();
        let col = self.im2col(x);
        let mut out: Vec<f64> = (0..rows).flat_map(|_| self.bias.data.iter().copied()).collect();
        gemm(rows, self.weight.shape[0], o, &col, false, &self.weight.data, false, &mut out, 1.0);
        Volume::from_vec([x.w(), x.h(), x.d(), o], out)
    }

    /// Accumulates into `grads` (`[weight, bias]`); returns the input gradient when asked.
    pub fn backward(
        &self,
        x: &Volume,
        grad_out: &Volume,
        grads: &mut [Vec<f64>],
        want_input: bool,
    ) -> Option<Volume> {
        let rows = x.positions();
        let (k, o) = (self.weight.shape[0], self.output_dim());
        let col = self.im2col(x);
        gemm(k, rows, o, &col, true, grad_out.data(), false, &mut grads[0], 1.0);
        for row in grad_out.data().chunks_exact(o) {
            for (g, v) in grads[1].iter_mut().zip(row) {
                *g += v;
            }
        }
        want_input.then(|| {
            let mut gcol = col;
            gemm(rows, o, k, grad_out.data(), false, &self.weight.data, true, &mut gcol, 0.0);
            self.col2im(&gcol, x.dims())
        })
    }
}

impl Parameterized for Conv3d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// True when a 2×2 spatial average pool keeps both spatial dims at least 2.
pub fn can_halve(w: usize, h: usize) -> bool {
    w / 2 >= 2 && h / 2 >= 2
}

/// Average pool with kernel and stride 2 over `(x, y)`, 1 over `t`. Odd
/// trailing rows/columns are dropped.
pub fn avg_pool2(x: &Volume) -> Volume {
    let [w, h, d, c] = x.dims();
    let (wo, ho) = (w / 2, h / 2);
    let mut out = Volume::zeros([wo, ho, d, c]);
    for t in 0..d {
        for y in 0..ho {
            for xx in 0..wo {
                let o = out.index(xx, y, t, 0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = x.index(2 * xx + dx, 2 * y + dy, t, 0);
                    for ch in 0..c {
                        out.data_mut()[o + ch] += 0.25 * x.data()[i + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Volume, input_dims: [usize; 4]) -> Volume {
    let [wo, ho, d, c] = grad_out.dims();
    let mut gx = Volume::zeros(input_dims);
    for t in 0..d {
        for y in 0..ho {
            for xx in 0..wo {
                let o = grad_out.index(xx, y, t, 0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = gx.index(2 * xx + dx, 2 * y + dy, t, 0);
                    for ch in 0..c {
                        gx.data_mut()[i + ch] += 0.25 * grad_out.data()[o + ch];
                    }
                }
            }
        }
    }
    gx
}

/// Source taps for one output coordinate of a bilinear resize
/// (half-pixel centers, edge clamped).
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Per-frame bilinear resize of the spatial axes.
pub fn resize_bilinear(x: &Volume, w_out: usize, h_out: usize) -> Volume {
    let [w, h, d, c] = x.dims();
    let (tx, ty) = (taps(w, w_out), taps(h, h_out));
    let mut out = Volume::zeros([w_out, h_out, d, c]);
    for t in 0..d {
        for (yo, ty) in ty.iter().enumerate() {
            for (xo, tx) in tx.iter().enumerate() {
                let o = out.index(xo, yo, t, 0);
                for (yi, wy) in [(ty.i0, ty.w0), (ty.i1, ty.w1)] {
                    for (xi, wx) in [(tx.i0, tx.w0), (tx.i1, tx.w1)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let i = x.index(xi, yi, t, 0);
                        for ch in 0..c {
                            out.data_mut()[o + ch] += wgt * x.data()[i + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(grad_out: &Volume, input_dims: [usize; 4]) -> Volume {
    let [w_out, h_out, d, c] = grad_out.dims();
    let (tx, ty) = (taps(input_dims[0], w_out), taps(input_dims[1], h_out));
    let mut gx = Volume::zeros(input_dims);
    for t in 0..d {
        for (yo, ty) in ty.iter().enumerate() {
            for (xo, tx) in tx.iter().enumerate() {
                let o = grad_out.index(xo, yo, t, 0);
                for (yi, wy) in [(ty.i0, ty.w0), (ty.i1, ty.w1)] {
                    for (xi, wx) in [(tx.i0, tx.w0), (tx.i1, tx.w1)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let i = gx.index(xi, yi, t, 0);
                        for ch in 0..c {
                            gx.data_mut()[i + ch] += wgt * grad_out.data()[o + ch];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Inverted-dropout mask: each entry is `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    if rate >= 1.0 {
        return Some(vec![0.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

pub fn apply_mask(v: &mut [f64], mask: &[f64]) {
    for (x, m) in v.iter_mut().zip(mask) {
        *x *= m;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter group. Weight decay is the coupled L2 form
/// (`g += wd * θ`), applied only when the group is stepped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(module: &impl Parameterized) -> Self {
        let zeros: Vec<Vec<f64>> = module.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &Grads, cfg: &AdamConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g[i] + cfg.weight_decay * p.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_volume(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Volume {
        Volume::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution oracle.
    fn conv_oracle(conv: &Conv3d, x: &Volume) -> Volume {
        let [w, h, d, c] = x.dims();
        let (kt, ks) = (conv.temporal_kernel, conv.spatial_kernel);
        let o = conv.output_dim();
        Volume::from_fn([w, h, d, o], |xx, y, t, oc| {
            let mut acc = conv.bias.data[oc];
            for dt in 0..kt {
                for dy in 0..ks {
                    for dx in 0..ks {
                        let st = t as isize + dt as isize - (kt / 2) as isize;
                        let sy = y as isize + dy as isize - (ks / 2) as isize;
                        let sx = xx as isize + dx as isize - (ks / 2) as isize;
                        if st < 0 || sy < 0 || sx < 0 || st >= d as isize || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for ic in 0..c {
                            let row = ((dt * ks + dy) * ks + dx) * c + ic;
                            acc += conv.weight.data[row * o + oc]
                                * x.get(sx as usize, sy as usize, st as usize, ic);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv3d::new(3, 4, 3, 3, &mut rng).unwrap();
        conv.bias = Param::uniform(&[4], 0.5, &mut rng);
        let x = rand_volume([4, 3, 5, 3], &mut rng);
        let got = conv.forward(&x).unwrap();
        let want = conv_oracle(&conv, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Finite-difference check of a scalar objective `sum(out * probe)`.
    fn fd_check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += eps;
            xm[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!(
                (num - analytic[i]).abs() <= 1e-6 * (1.0 + num.abs()),
                "index {i}: numeric {num} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv3d::new(2, 3, 3, 3, &mut rng).unwrap();
        let x = rand_volume([3, 3, 4, 2], &mut rng);
        let probe = rand_volume([3, 3, 4, 3], &mut rng);
        let mut grads = conv.zero_grads();
        let gx = conv.backward(&x, &probe, &mut grads.0, true).unwrap();
        let dims = x.dims();
        let objective = |data: &[f64]| {
            let v = Volume::from_vec(dims, data.to_vec()).unwrap();
            let out = conv.forward(&v).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        fd_check(&objective, x.data(), gx.data());
        let weight_obj = |w: &[f64]| {
            let mut c2 = conv.clone();
            c2.weight.data = w.to_vec();
            let out = c2.forward(&x).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        fd_check(&weight_obj, &conv.weight.data, &grads.0[0]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lin = Linear::new(4, 3, &mut rng);
        let rows = 5;
        let x: Vec<f64> = (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = lin.zero_grads();
        let gx = lin.backward(&x, rows, &probe, &mut grads.0, true).unwrap();
        let obj = |d: &[f64]| lin.forward(d, rows).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        fd_check(&obj, &x, &gx);
        let bias_obj = |b: &[f64]| {
            let mut l2 = lin.clone();
            l2.bias.data = b.to_vec();
            l2.forward(&x, rows).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        fd_check(&bias_obj, &lin.bias.data, &grads.0[1]);
    }

    #[test]
    fn pool_and_resize_backward_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_volume([6, 4, 2, 3], &mut rng);
        let pooled = avg_pool2(&x);
        assert_eq!(pooled.dims(), [3, 2, 2, 3]);
        let g = rand_volume(pooled.dims(), &mut rng);
        let gx = avg_pool2_backward(&g, x.dims());
        let lhs: f64 = pooled.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = resize_bilinear(&pooled, 6, 4);
        let g2 = rand_volume(up.dims(), &mut rng);
        let gp = resize_bilinear_backward(&g2, pooled.dims());
        let lhs: f64 = up.data().iter().zip(g2.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = pooled.data().iter().zip(gp.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_volume([4, 4, 2, 2], &mut rng);
        assert_eq!(resize_bilinear(&x, 4, 4), x);
        let k = Volume::filled([2, 2, 1, 1], 3.5);
        assert!(resize_bilinear(&k, 8, 8).data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn halving_guard() {
        assert!(can_halve(4, 4));
        assert!(!can_halve(3, 8));
        assert!(!can_halve(8, 2));
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask(10, 0.0, &mut rng).is_none());
        assert!(dropout_mask(10, 1.0, &mut rng).unwrap().iter().all(|&m| m == 0.0));
        let m = dropout_mask(10_000, 0.5, &mut rng).unwrap();
        let kept = m.iter().filter(|&&v| v == 2.0).count();
        assert!((4500..5500).contains(&kept));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut lin = Linear::new(2, 1, &mut ChaCha8Rng::seed_from_u64(0));
        let before = lin.weight.data.clone();
        let mut state = AdamState::new(&lin);
        let grads = Grads(vec![vec![1.0, -2.0], vec![0.5]]);
        state.step(lin.params_mut(), &grads, &AdamConfig::new(0.1, 0.0));
        assert!((lin.weight.data[0] - (before[0] - 0.1)).abs() < 1e-6);
        assert!((lin.weight.data[1] - (before[1] + 0.1)).abs() < 1e-6);
        assert!((lin.bias.data[0] + 0.1).abs() < 1e-6);
    }
}
