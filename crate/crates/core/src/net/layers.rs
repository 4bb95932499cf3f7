//! Primitive layers with explicit forward/backward passes.
//!
//! Activations are row-major `f64` buffers. Every `backward` accumulates
//! parameter gradients into a [`Grads`] and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::params::{Grads, ParamId, ParamKind, ParamStore};

/// `c[m×n] = beta·c + a[m×k] · b[k×n]`, with `b` optionally stored transposed
/// as `[n×k]`.
fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, b_transposed: bool, c: &mut [f64], beta: f64) {
    let a = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("out shape");
    if b_transposed {
        let b = ArrayView2::from_shape((n, k), b).expect("rhs shape");
        general_mat_mul(1.0, &a, &b.t(), beta, &mut c);
    } else {
        let b = ArrayView2::from_shape((k, n), b).expect("rhs shape");
        general_mat_mul(1.0, &a, &b, beta, &mut c);
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
fn gemm_at_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    let a = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let b = ArrayView2::from_shape((m, n), b).expect("rhs shape");
    let mut c = ArrayViewMut2::from_shape((k, n), c).expect("out shape");
    general_mat_mul(1.0, &a.t(), &b, 1.0, &mut c);
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero `grad` wherever the ReLU output was not positive.
pub(crate) fn relu_backward(grad: &mut [f64], out: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y = x·Wᵀ + b`, `W` is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in uniform initialisation.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(rng, format!("{path}/weight"), &[out_dim, in_dim], bound);
        let bias = store.uniform(rng, format!("{path}/bias"), &[out_dim], bound);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.constant(format!("{path}/weight"), &[out_dim, in_dim], 0.0, ParamKind::Trainable);
        let bias = store.constant(format!("{path}/bias"), &[out_dim], 0.0, ParamKind::Trainable);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x` holds `rows × in_dim` values.
    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let b = store.get(self.bias);
        let mut y: Vec<f64> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        gemm(x, rows, self.in_dim, store.get(self.weight), self.out_dim, true, &mut y, 1.0);
        y
    }

    pub fn backward(&self, store: &ParamStore, x: &[f64], rows: usize, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        self.accumulate(x, rows, dy, grads);
        let mut dx = vec![0.0; rows * self.in_dim];
        gemm(dy, rows, self.out_dim, store.get(self.weight), self.in_dim, false, &mut dx, 0.0);
        dx
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: &[f64], rows: usize, dy: &[f64], grads: &mut Grads) {
        gemm_at_acc(dy, rows, self.out_dim, x, self.in_dim, grads.get_mut(self.weight));
        let db = grads.get_mut(self.bias);
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    rows: usize,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, dims: (usize, usize, usize)) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{path}/fc1"), dims.0, dims.1),
            fc2: Linear::new(store, rng, &format!("{path}/fc2"), dims.1, dims.2),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = self.fc1.forward(store, x, rows);
        relu_inplace(&mut h);
        self.fc2.forward(store, &h, rows)
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &[f64], rows: usize) -> (Vec<f64>, MlpCache) {
        let mut h = self.fc1.forward(store, x, rows);
        relu_inplace(&mut h);
        let y = self.fc2.forward(store, &h, rows);
        (
            y,
            MlpCache {
                input: x.to_vec(),
                hidden: h,
                rows,
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, cache: &MlpCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut dh = self.fc2.backward(store, &cache.hidden, cache.rows, dy, grads);
        relu_backward(&mut dh, &cache.hidden);
        self.fc1.backward(store, &cache.input, cache.rows, &dh, grads)
    }
}

/// Strided 1-D convolution without padding. Inputs are time-major
/// `[batch, len, c_in]`; the weight is `[c_out, c_in, kernel]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.uniform(rng, format!("{path}/weight"), &[c_out, c_in, kernel], bound);
        let bias = store.uniform(rng, format!("{path}/bias"), &[c_out], bound);
        Conv1d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        if len < self.kernel {
            0
        } else {
            (len - self.kernel) / self.stride + 1
        }
    }

    fn im2col(&self, x: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let out_len = self.out_len(len);
        let width = self.c_in * self.kernel;
        let mut cols = vec![0.0; batch * out_len * width];
        for b in 0..batch {
            let xb = &x[b * len * self.c_in..(b + 1) * len * self.c_in];
            for t in 0..out_len {
                let row = &mut cols[(b * out_len + t) * width..(b * out_len + t + 1) * width];
                for j in 0..self.kernel {
                    let src = &xb[(t * self.stride + j) * self.c_in..(t * self.stride + j + 1) * self.c_in];
                    for (ci, &v) in src.iter().enumerate() {
                        row[ci * self.kernel + j] = v;
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let out_len = self.out_len(len);
        let rows = batch * out_len;
        let cols = self.im2col(x, batch, len);
        let b = store.get(self.bias);
        let mut y: Vec<f64> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        gemm(&cols, rows, self.c_in * self.kernel, store.get(self.weight), self.c_out, true, &mut y, 1.0);
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        batch: usize,
        len: usize,
        dy: &[f64],
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let out_len = self.out_len(len);
        let rows = batch * out_len;
        let width = self.c_in * self.kernel;
        let cols = self.im2col(x, batch, len);
        gemm_at_acc(dy, rows, self.c_out, &cols, width, grads.get_mut(self.weight));
        let db = grads.get_mut(self.bias);
        for row in dy.chunks_exact(self.c_out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; rows * width];
        gemm(dy, rows, self.c_out, store.get(self.weight), width, false, &mut dcols, 0.0);
        let mut dx = vec![0.0; batch * len * self.c_in];
        for b in 0..batch {
            let dxb = &mut dx[b * len * self.c_in..(b + 1) * len * self.c_in];
            for t in 0..out_len {
                let row = &dcols[(b * out_len + t) * width..(b * out_len + t + 1) * width];
                for j in 0..self.kernel {
                    let dst = &mut dxb[(t * self.stride + j) * self.c_in..(t * self.stride + j + 1) * self.c_in];
                    for (ci, d) in dst.iter_mut().enumerate() {
                        *d += row[ci * self.kernel + j];
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Per-channel affine normalisation that always uses running statistics.
///
/// Training forwards normalise with the current running mean/variance (so the
/// output of one sample never depends on the rest of its batch) and report
/// per-channel sums; the trainer folds those into the running statistics after
/// the step. The statistics are buffers and receive no gradient.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Per-channel sums used to refresh running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelStats {
    pub count: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl ChannelStats {
    pub fn merge(&mut self, other: &ChannelStats) {
        if self.sum.is_empty() {
            *self = other.clone();
            return;
        }
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: store.constant(format!("{path}/gamma"), &[channels], 1.0, ParamKind::Trainable),
            beta: store.constant(format!("{path}/beta"), &[channels], 0.0, ParamKind::Trainable),
            running_mean: store.constant(format!("{path}/running_mean"), &[channels], 0.0, ParamKind::Buffer),
            running_var: store.constant(format!("{path}/running_var"), &[channels], 1.0, ParamKind::Buffer),
            channels,
        }
    }

    fn scale_shift(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let (g, b) = (store.get(self.gamma), store.get(self.beta));
        let (m, v) = (store.get(self.running_mean), store.get(self.running_var));
        let scale: Vec<f64> = (0..self.channels).map(|c| g[c] / (v[c] + NORM_EPS).sqrt()).collect();
        let shift: Vec<f64> = (0..self.channels).map(|c| b[c] - m[c] * scale[c]).collect();
        (scale, shift)
    }

    /// Normalise `x` (`[rows, channels]`) in place.
    pub fn forward_inplace(&self, store: &ParamStore, x: &mut [f64]) {
        let (scale, shift) = self.scale_shift(store);
        for row in x.chunks_exact_mut(self.channels) {
            for c in 0..self.channels {
                row[c] = row[c] * scale[c] + shift[c];
            }
        }
    }

    pub fn stats(&self, x: &[f64]) -> ChannelStats {
        let mut s = ChannelStats {
            count: (x.len() / self.channels) as f64,
            sum: vec![0.0; self.channels],
            sum_sq: vec![0.0; self.channels],
        };
        for row in x.chunks_exact(self.channels) {
            for ((sum, sq), &v) in s.sum.iter_mut().zip(&mut s.sum_sq).zip(row) {
                *sum += v;
                *sq += v * v;
            }
        }
        s
    }

    /// `x` is the pre-normalisation input, `dy` the output gradient.
    pub fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let g = store.get(self.gamma);
        let (m, v) = (store.get(self.running_mean), store.get(self.running_var));
        let inv: Vec<f64> = v.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dx = vec![0.0; x.len()];
        for ((xr, dr), dxr) in x
            .chunks_exact(self.channels)
            .zip(dy.chunks_exact(self.channels))
            .zip(dx.chunks_exact_mut(self.channels))
        {
            for c in 0..self.channels {
                let xhat = (xr[c] - m[c]) * inv[c];
                dgamma[c] += dr[c] * xhat;
                dbeta[c] += dr[c];
                dxr[c] = dr[c] * g[c] * inv[c];
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += b;
        }
        dx
    }

    /// Fold batch statistics into the running buffers. The first update
    /// replaces the initial identity statistics outright.
    pub fn update_running(&self, store: &mut ParamStore, stats: &ChannelStats, first: bool) {
        if stats.count < 2.0 {
            return;
        }
        let n = stats.count;
        let mean: Vec<f64> = stats.sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = stats
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, mu)| ((sq / n - mu * mu) * n / (n - 1.0)).max(0.0))
            .collect();
        let momentum = if first { 1.0 } else { NORM_MOMENTUM };
        let rm = store.get_mut(self.running_mean);
        for (r, m) in rm.iter_mut().zip(&mean) {
            *r = ((1.0 - momentum) * *r + momentum * m) as f32 as f64;
        }
        let rv = store.get_mut(self.running_var);
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = ((1.0 - momentum) * *r + momentum * v) as f32 as f64;
        }
    }
}

/// Row-wise layer normalisation with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.constant(format!("{path}/gamma"), &[dim], 1.0, ParamKind::Trainable),
            beta: store.constant(format!("{path}/beta"), &[dim], 0.0, ParamKind::Trainable),
            dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let (g, b) = (store.get(self.gamma), store.get(self.beta));
        let n = self.dim as f64;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / self.dim);
        for ((xr, yr), hr) in x
            .chunks_exact(self.dim)
            .zip(y.chunks_exact_mut(self.dim))
            .zip(xhat.chunks_exact_mut(self.dim))
        {
            let mean = xr.iter().sum::<f64>() / n;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for i in 0..self.dim {
                hr[i] = (xr[i] - mean) * inv;
                yr[i] = hr[i] * g[i] + b[i];
            }
            inv_std.push(inv);
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, cache: &LayerNormCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let g = store.get(self.gamma);
        let n = self.dim as f64;
        let mut dx = vec![0.0; dy.len()];
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        for (((dr, hr), dxr), &inv) in dy
            .chunks_exact(self.dim)
            .zip(cache.xhat.chunks_exact(self.dim))
            .zip(dx.chunks_exact_mut(self.dim))
            .zip(&cache.inv_std)
        {
            let mut sum_d = 0.0;
            let mut sum_dh = 0.0;
            for i in 0..self.dim {
                let dxh = dr[i] * g[i];
                sum_d += dxh;
                sum_dh += dxh * hr[i];
                dgamma[i] += dr[i] * hr[i];
                dbeta[i] += dr[i];
            }
            for i in 0..self.dim {
                let dxh = dr[i] * g[i];
                dxr[i] = inv / n * (n * dxh - sum_d - hr[i] * sum_dh);
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += b;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, &mut rng, "l", 3, 2);
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.25];
        let y = lin.forward(&s, &x, 2);
        let (w, b) = (s.get(lin.weight), s.get(lin.bias));
        for r in 0..2 {
            for o in 0..2 {
                let naive: f64 = (0..3).map(|i| w[o * 3 + i] * x[r * 3 + i]).sum::<f64>() + b[o];
                assert!((y[r * 2 + o] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let conv = Conv1d::new(&mut s, &mut rng, "c", 2, 3, 3, 2);
        let len = 9;
        let x: Vec<f64> = (0..2 * len * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = conv.forward(&s, &x, 2, len);
        let out_len = conv.out_len(len);
        assert_eq!(out_len, 4);
        let (w, bias) = (s.get(conv.weight), s.get(conv.bias));
        for b in 0..2 {
            for t in 0..out_len {
                for co in 0..3 {
                    let mut acc = bias[co];
                    for ci in 0..2 {
                        for j in 0..3 {
                            acc += w[(co * 2 + ci) * 3 + j] * x[b * len * 2 + (t * 2 + j) * 2 + ci];
                        }
                    }
                    assert!((y[(b * out_len + t) * 3 + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_norm_first_update_adopts_batch_stats() {
        let mut s = ParamStore::new();
        let n = ChannelNorm::new(&mut s, "n", 2);
        let x = [1.0, 10.0, 3.0, 14.0];
        let st = n.stats(&x);
        n.update_running(&mut s, &st, true);
        assert_eq!(s.get(n.running_mean), &[2.0, 12.0]);
        assert_eq!(s.get(n.running_var), &[2.0, 8.0]);
        let mut y = x.to_vec();
        n.forward_inplace(&s, &mut y);
        assert!((y[0] + y[2]).abs() < 1e-9);
    }
}
