//! Patch transformer over a window of cycle embeddings.
//!
//! The `W × d` embedding sequence is cut into patches of `P` cycles at stride
//! `S`; each flattened patch is projected to a `d`-wide token, sinusoidal
//! positions are added right after the projection, and post-norm encoder
//! layers (self-attention, then a ReLU feed-forward block) process the tokens.
//! The latent state is the mean over tokens.

use rand::Rng;

use super::config::NetConfig;
use super::layers::{relu_backward, relu_inplace, LayerNorm, LayerNormCache, Linear};
use super::params::{Grads, ParamStore};

pub fn sinusoidal_positions(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    heads: usize,
    d: usize,
}

#[derive(Clone, Debug)]
struct LayerCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × n × n` attention probabilities.
    probs: Vec<f64>,
    attn_concat: Vec<f64>,
    norm1: LayerNormCache,
    x1: Vec<f64>,
    hidden: Vec<f64>,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, d: usize, heads: usize, ff: usize) -> Self {
        EncoderLayer {
            q: Linear::new(store, rng, &format!("{path}/attn_q"), d, d),
            k: Linear::new(store, rng, &format!("{path}/attn_k"), d, d),
            v: Linear::new(store, rng, &format!("{path}/attn_v"), d, d),
            out: Linear::new(store, rng, &format!("{path}/attn_out"), d, d),
            norm1: LayerNorm::new(store, &format!("{path}/norm1"), d),
            ff1: Linear::new(store, rng, &format!("{path}/ff1"), d, ff),
            ff2: Linear::new(store, rng, &format!("{path}/ff2"), ff, d),
            norm2: LayerNorm::new(store, &format!("{path}/norm2"), d),
            heads,
            d,
        }
    }

    fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, LayerCache) {
        let d = self.d;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(store, x, n);
        let k = self.k.forward(store, x, n);
        let v = self.v.forward(store, x, n);
        let mut probs = vec![0.0; self.heads * n * n];
        let mut concat = vec![0.0; n * d];
        for h in 0..self.heads {
            let off = h * dh;
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let qi = &q[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let kj = &k[j * d + off..j * d + off + dh];
                    row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let oi = &mut concat[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let w = row[j];
                    for (o, vj) in oi.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *o += w * vj;
                    }
                }
            }
        }
        let attn = self.out.forward(store, &concat, n);
        let r1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let (x1, norm1) = self.norm1.forward(store, &r1);
        let mut hidden = self.ff1.forward(store, &x1, n);
        relu_inplace(&mut hidden);
        let f = self.ff2.forward(store, &hidden, n);
        let r2: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
        let (y, norm2) = self.norm2.forward(store, &r2);
        (
            y,
            LayerCache {
                x: x.to_vec(),
                q,
                k,
                v,
                probs,
                attn_concat: concat,
                norm1,
                x1,
                hidden,
                norm2,
            },
        )
    }

    fn backward(&self, store: &ParamStore, c: &LayerCache, dy: &[f64], n: usize, grads: &mut Grads) -> Vec<f64> {
        let d = self.d;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dr2 = self.norm2.backward(store, &c.norm2, dy, grads);
        let mut dhidden = self.ff2.backward(store, &c.hidden, n, &dr2, grads);
        relu_backward(&mut dhidden, &c.hidden);
        let dx1_ff = self.ff1.backward(store, &c.x1, n, &dhidden, grads);
        let dx1: Vec<f64> = dr2.iter().zip(&dx1_ff).map(|(a, b)| a + b).collect();
        let dr1 = self.norm1.backward(store, &c.norm1, &dx1, grads);
        let dconcat = self.out.backward(store, &c.attn_concat, n, &dr1, grads);

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; n * n];
        for h in 0..self.heads {
            let off = h * dh;
            let p = &c.probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let doi = &dconcat[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    let da: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[i * n + j] = da;
                    dot += da * p[i * n + j];
                    let w = p[i * n + j];
                    for (g, o) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                        *g += w * o;
                    }
                }
                for j in 0..n {
                    ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - dot) * scale;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let s = ds[i * n + j];
                    if s == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += s * c.k[j * d + off + t];
                        dk[j * d + off + t] += s * c.q[i * d + off + t];
                    }
                }
            }
        }
        let mut dx = dr1;
        for (lin, g) in [(&self.q, &dq), (&self.k, &dk), (&self.v, &dv)] {
            let part = lin.backward(store, &c.x, n, g, grads);
            for (a, b) in dx.iter_mut().zip(&part) {
                *a += b;
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct WindowEncoder {
    pub patch_proj: Linear,
    pub layers: Vec<EncoderLayer>,
    positions: Vec<f64>,
    window: usize,
    patch_len: usize,
    stride: usize,
    n_tokens: usize,
    d: usize,
}

#[derive(Clone, Debug)]
pub struct WindowEncoderCache {
    patches: Vec<f64>,
    layers: Vec<LayerCache>,
}

impl WindowEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &NetConfig) -> Self {
        let d = cfg.d_model;
        let patch_proj = Linear::new(store, rng, "window_encoder/patch_proj", cfg.patch_len * d, d);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("window_encoder/layer{i}"), d, cfg.heads, cfg.ff_width))
            .collect();
        WindowEncoder {
            patch_proj,
            layers,
            positions: sinusoidal_positions(cfg.n_tokens(), d),
            window: cfg.window,
            patch_len: cfg.patch_len,
            stride: cfg.patch_stride,
            n_tokens: cfg.n_tokens(),
            d,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn patches(&self, emb: &[f64]) -> Vec<f64> {
        let width = self.patch_len * self.d;
        let mut out = Vec::with_capacity(self.n_tokens * width);
        for j in 0..self.n_tokens {
            let start = j * self.stride * self.d;
            out.extend_from_slice(&emb[start..start + width]);
        }
        out
    }

    /// Token sequence before the encoder layers (`n_tokens × d`).
    pub fn tokens(&self, store: &ParamStore, emb: &[f64]) -> Vec<f64> {
        let mut t = self.patch_proj.forward(store, &self.patches(emb), self.n_tokens);
        for (a, p) in t.iter_mut().zip(&self.positions) {
            *a += p;
        }
        t
    }

    /// `emb` holds `window × d` values; returns the pooled latent.
    pub fn forward(&self, store: &ParamStore, emb: &[f64]) -> (Vec<f64>, WindowEncoderCache) {
        assert_eq!(emb.len(), self.window * self.d, "window embedding shape");
        let patches = self.patches(emb);
        let n = self.n_tokens;
        let mut x = self.patch_proj.forward(store, &patches, n);
        for (a, p) in x.iter_mut().zip(&self.positions) {
            *a += p;
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(store, &x, n);
            caches.push(c);
            x = y;
        }
        let mut z = vec![0.0; self.d];
        for row in x.chunks_exact(self.d) {
            for (a, b) in z.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in &mut z {
            *a /= n as f64;
        }
        (z, WindowEncoderCache { patches, layers: caches })
    }

    /// Returns the gradient with respect to the `window × d` embeddings.
    pub fn backward(&self, store: &ParamStore, cache: &WindowEncoderCache, dz: &[f64], grads: &mut Grads) -> Vec<f64> {
        let n = self.n_tokens;
        let mut dx: Vec<f64> = (0..n).flat_map(|_| dz.iter().map(|g| g / n as f64)).collect();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = layer.backward(store, c, &dx, n, grads);
        }
        let dpatch = self.patch_proj.backward(store, &cache.patches, n, &dx, grads);
        let width = self.patch_len * self.d;
        let mut demb = vec![0.0; self.window * self.d];
        for j in 0..n {
            let start = j * self.stride * self.d;
            for (a, b) in demb[start..start + width].iter_mut().zip(&dpatch[j * width..(j + 1) * width]) {
                *a += b;
            }
        }
        demb
    }
}
