//! Shared 1-D CNN mapping one cycle's V/I/T series to an embedding.

use rand::Rng;

use super::config::NetConfig;
use super::layers::{relu_backward, relu_inplace, ChannelNorm, ChannelStats, Conv1d, Linear};
use super::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::data::CycleSeries;

/// Fixed per-channel input scaling (V, A, °C) bringing raw samples to order 1.
pub const VOLTAGE_SCALE: f64 = 3.6;
pub const TEMPERATURE_SCALE: f64 = 45.0;

/// Three conv → norm → ReLU stages, average pooling over every time position
/// (padding included) and a linear projection to `d_model`.
#[derive(Clone, Debug)]
pub struct CycleEncoder {
    pub convs: [Conv1d; 3],
    pub norms: [ChannelNorm; 3],
    pub proj: Linear,
    pub norm_updates: ParamId,
    lens: [usize; 4],
    current_scale: f64,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CycleEncoderCache {
    batch: usize,
    input: Vec<f64>,
    /// Conv outputs before normalisation.
    pre: [Vec<f64>; 3],
    /// Stage outputs after ReLU.
    post: [Vec<f64>; 3],
    pooled: Vec<f64>,
}

impl CycleEncoderCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Pre-normalisation statistics of each stage for one forward.
pub type EncoderStats = [ChannelStats; 3];

impl CycleEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &NetConfig) -> Self {
        let ch = cfg.conv_channels;
        let k = cfg.conv_kernels;
        let s = cfg.conv_stride;
        let convs = [
            Conv1d::new(store, rng, "cycle_encoder/conv1", 3, ch[0], k[0], s),
            Conv1d::new(store, rng, "cycle_encoder/conv2", ch[0], ch[1], k[1], s),
            Conv1d::new(store, rng, "cycle_encoder/conv3", ch[1], ch[2], k[2], s),
        ];
        let norms = [
            ChannelNorm::new(store, "cycle_encoder/norm1", ch[0]),
            ChannelNorm::new(store, "cycle_encoder/norm2", ch[1]),
            ChannelNorm::new(store, "cycle_encoder/norm3", ch[2]),
        ];
        let proj = Linear::new(store, rng, "cycle_encoder/proj", ch[2], cfg.d_model);
        let norm_updates = store.constant("cycle_encoder/norm_updates", &[1], 0.0, ParamKind::Buffer);
        CycleEncoder {
            convs,
            norms,
            proj,
            norm_updates,
            lens: cfg.conv_lengths(),
            current_scale: cfg.action_scale,
        }
    }

    pub fn t_max(&self) -> usize {
        self.lens[0]
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// Stack series into the `[batch, t_max, 3]` input tensor.
    pub fn input_tensor(&self, series: &[&CycleSeries]) -> Vec<f64> {
        let t_max = self.t_max();
        let mut x = Vec::with_capacity(series.len() * t_max * 3);
        for s in series {
            debug_assert_eq!(s.t_max(), t_max, "series not canonicalised to t_max");
            for j in 0..t_max {
                x.push(s.voltage[j] as f64 / VOLTAGE_SCALE);
                x.push(s.current[j] as f64 / self.current_scale);
                x.push(s.temperature[j] as f64 / TEMPERATURE_SCALE);
            }
        }
        x
    }

    fn run(&self, store: &ParamStore, input: &[f64], batch: usize, keep: bool) -> (Vec<f64>, Option<CycleEncoderCache>, EncoderStats) {
        let mut x = input.to_vec();
        let mut pre: [Vec<f64>; 3] = Default::default();
        let mut post: [Vec<f64>; 3] = Default::default();
        let mut stats: EncoderStats = Default::default();
        for i in 0..3 {
            let y = self.convs[i].forward(store, &x, batch, self.lens[i]);
            stats[i] = self.norms[i].stats(&y);
            let mut a = y.clone();
            self.norms[i].forward_inplace(store, &mut a);
            relu_inplace(&mut a);
            if keep {
                pre[i] = y;
                post[i] = a.clone();
            }
            x = a;
        }
        let len = self.lens[3];
        let c = self.norms[2].channels;
        let mut pooled = vec![0.0; batch * c];
        for b in 0..batch {
            let dst = &mut pooled[b * c..(b + 1) * c];
            for row in x[b * len * c..(b + 1) * len * c].chunks_exact(c) {
                for (p, v) in dst.iter_mut().zip(row) {
                    *p += v;
                }
            }
            for p in dst.iter_mut() {
                *p /= len as f64;
            }
        }
        let emb = self.proj.forward(store, &pooled, batch);
        let cache = keep.then(|| CycleEncoderCache {
            batch,
            input: input.to_vec(),
            pre,
            post,
            pooled,
        });
        (emb, cache, stats)
    }

    /// Embeddings `[batch, d]` without keeping activations.
    pub fn forward(&self, store: &ParamStore, input: &[f64], batch: usize) -> Vec<f64> {
        self.run(store, input, batch, false).0
    }

    pub fn forward_train(&self, store: &ParamStore, input: &[f64], batch: usize) -> (Vec<f64>, CycleEncoderCache, EncoderStats) {
        let (emb, cache, stats) = self.run(store, input, batch, true);
        (emb, cache.expect("cache requested"), stats)
    }

    pub fn encode(&self, store: &ParamStore, series: &CycleSeries) -> Vec<f64> {
        self.forward(store, &self.input_tensor(&[series]), 1)
    }

    /// Accumulate parameter gradients for `d_emb` (`[batch, d]`).
    pub fn backward(&self, store: &ParamStore, cache: &CycleEncoderCache, d_emb: &[f64], grads: &mut Grads) {
        let batch = cache.batch;
        let d_pooled = self.proj.backward(store, &cache.pooled, batch, d_emb, grads);
        let len = self.lens[3];
        let c = self.norms[2].channels;
        let mut d = vec![0.0; batch * len * c];
        for b in 0..batch {
            let src = &d_pooled[b * c..(b + 1) * c];
            for row in d[b * len * c..(b + 1) * len * c].chunks_exact_mut(c) {
                for (r, s) in row.iter_mut().zip(src) {
                    *r = s / len as f64;
                }
            }
        }
        for i in (0..3).rev() {
            relu_backward(&mut d, &cache.post[i]);
            let d_conv = self.norms[i].backward(store, &cache.pre[i], &d, grads);
            let x_in = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            match self.convs[i].backward(store, x_in, batch, self.lens[i], &d_conv, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Fold batch statistics into the running buffers.
    pub fn update_running(&self, store: &mut ParamStore, stats: &EncoderStats) {
        let first = store.get(self.norm_updates)[0] == 0.0;
        for (norm, s) in self.norms.iter().zip(stats) {
            norm.update_running(store, s, first);
        }
        store.get_mut(self.norm_updates)[0] += 1.0;
    }
}
