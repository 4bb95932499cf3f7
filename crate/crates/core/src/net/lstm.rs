//! Recurrent baseline over per-cycle summary features. It estimates current
//! SOH only.

use rand::Rng;

use super::cycle_encoder::{TEMPERATURE_SCALE, VOLTAGE_SCALE};
use super::params::{Grads, ParamId, ParamStore};
use crate::data::CycleSeries;

/// Features per cycle: mean/min/max voltage, mean current, mean temperature
/// and the real-sample fraction of the canonical length.
pub const SUMMARY_FEATURES: usize = 6;

pub fn summary_features(series: &CycleSeries, current_scale: f64) -> [f64; SUMMARY_FEATURES] {
    let (v, i, t) = series.real();
    let n = v.len().max(1) as f64;
    let mean = |xs: &[f32]| xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let vmin = v.iter().fold(f64::INFINITY, |m, &x| m.min(x as f64));
    let vmax = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    [
        mean(v) / VOLTAGE_SCALE,
        vmin / VOLTAGE_SCALE,
        vmax / VOLTAGE_SCALE,
        mean(i) / current_scale,
        mean(t) / TEMPERATURE_SCALE,
        series.length as f64 / series.t_max() as f64,
    ]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate order: input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    input: usize,
    hidden: usize,
}

#[derive(Clone, Debug)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`.
    gates: Vec<f64>,
    c: Vec<f64>,
}

impl LstmLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmLayer {
            w_ih: store.uniform(rng, format!("{path}/w_ih"), &[4 * hidden, input], bound),
            w_hh: store.uniform(rng, format!("{path}/w_hh"), &[4 * hidden, hidden], bound),
            bias: store.uniform(rng, format!("{path}/bias"), &[4 * hidden], bound),
            input,
            hidden,
        }
    }

    fn forward(&self, store: &ParamStore, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<StepCache>) {
        let hsz = self.hidden;
        let (w_ih, w_hh, b) = (store.get(self.w_ih), store.get(self.w_hh), store.get(self.bias));
        let mut h = vec![0.0; hsz];
        let mut c = vec![0.0; hsz];
        let mut outs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let mut a = b.to_vec();
            for (r, ar) in a.iter_mut().enumerate() {
                let wi = &w_ih[r * self.input..(r + 1) * self.input];
                let wh = &w_hh[r * hsz..(r + 1) * hsz];
                *ar += wi.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                *ar += wh.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
            }
            let mut gates = vec![0.0; 4 * hsz];
            for j in 0..hsz {
                gates[j] = sigmoid(a[j]);
                gates[hsz + j] = sigmoid(a[hsz + j]);
                gates[2 * hsz + j] = a[2 * hsz + j].tanh();
                gates[3 * hsz + j] = sigmoid(a[3 * hsz + j]);
            }
            let c_new: Vec<f64> = (0..hsz)
                .map(|j| gates[hsz + j] * c[j] + gates[j] * gates[2 * hsz + j])
                .collect();
            let h_new: Vec<f64> = (0..hsz).map(|j| gates[3 * hsz + j] * c_new[j].tanh()).collect();
            caches.push(StepCache {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                gates,
                c: c_new.clone(),
            });
            outs.push(h_new.clone());
            h = h_new;
            c = c_new;
        }
        (outs, caches)
    }

    /// `dh_out[t]` is the gradient at each output; returns input gradients.
    fn backward(&self, store: &ParamStore, caches: &[StepCache], dh_out: &[Vec<f64>], grads: &mut Grads) -> Vec<Vec<f64>> {
        let hsz = self.hidden;
        let (w_ih, w_hh) = (store.get(self.w_ih), store.get(self.w_hh));
        let mut dh_next = vec![0.0; hsz];
        let mut dc_next = vec![0.0; hsz];
        let mut dxs = vec![Vec::new(); caches.len()];
        let mut gw_ih = vec![0.0; w_ih.len()];
        let mut gw_hh = vec![0.0; w_hh.len()];
        let mut gb = vec![0.0; 4 * hsz];
        for t in (0..caches.len()).rev() {
            let cch = &caches[t];
            let g = &cch.gates;
            let mut da = vec![0.0; 4 * hsz];
            let mut dc_prev = vec![0.0; hsz];
            for j in 0..hsz {
                let dh = dh_out[t][j] + dh_next[j];
                let tc = cch.c[j].tanh();
                let (ig, fg, gg, og) = (g[j], g[hsz + j], g[2 * hsz + j], g[3 * hsz + j]);
                let dc = dc_next[j] + dh * og * (1.0 - tc * tc);
                da[j] = dc * gg * ig * (1.0 - ig);
                da[hsz + j] = dc * cch.c_prev[j] * fg * (1.0 - fg);
                da[2 * hsz + j] = dc * ig * (1.0 - gg * gg);
                da[3 * hsz + j] = dh * tc * og * (1.0 - og);
                dc_prev[j] = dc * fg;
            }
            let mut dx = vec![0.0; self.input];
            let mut dh_prev = vec![0.0; hsz];
            for (r, &d) in da.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                for k in 0..self.input {
                    gw_ih[r * self.input + k] += d * cch.x[k];
                    dx[k] += d * w_ih[r * self.input + k];
                }
                for k in 0..hsz {
                    gw_hh[r * hsz + k] += d * cch.h_prev[k];
                    dh_prev[k] += d * w_hh[r * hsz + k];
                }
            }
            dxs[t] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        for (slot, part) in [(self.w_ih, gw_ih), (self.w_hh, gw_hh), (self.bias, gb)] {
            for (a, b) in grads.get_mut(slot).iter_mut().zip(&part) {
                *a += b;
            }
        }
        dxs
    }
}

/// Stacked LSTM returning its final hidden state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    steps: Vec<Vec<StepCache>>,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, input: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| LstmLayer::new(store, rng, &format!("lstm/layer{l}"), if l == 0 { input } else { hidden }, hidden))
            .collect();
        Lstm { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn forward(&self, store: &ParamStore, xs: &[Vec<f64>]) -> (Vec<f64>, LstmCache) {
        let mut seq = xs.to_vec();
        let mut steps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, c) = layer.forward(store, &seq);
            steps.push(c);
            seq = out;
        }
        (seq.last().cloned().unwrap_or_else(|| vec![0.0; self.hidden()]), LstmCache { steps })
    }

    /// Returns per-step input gradients for the gradient `dh` at the final
    /// hidden state.
    pub fn backward(&self, store: &ParamStore, cache: &LstmCache, dh: &[f64], grads: &mut Grads) -> Vec<Vec<f64>> {
        let steps = cache.steps[0].len();
        let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; self.hidden()]; steps];
        if steps > 0 {
            d_out[steps - 1] = dh.to_vec();
        }
        for (layer, c) in self.layers.iter().zip(&cache.steps).rev() {
            d_out = layer.backward(store, c, &d_out, grads);
        }
        d_out
    }
}
