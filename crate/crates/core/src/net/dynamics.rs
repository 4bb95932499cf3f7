//! Residual latent transition `z' = z + f([z ‖ u])` and its rollout.

use rand::Rng;

use super::layers::{relu_backward, relu_inplace, Linear};
use super::params::{Grads, ParamStore};

#[derive(Clone, Debug)]
pub struct Dynamics {
    pub fc1: Linear,
    /// Zero-initialised so an untrained rollout is the identity.
    pub fc2: Linear,
    d: usize,
}

#[derive(Clone, Debug)]
pub struct StepCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Dynamics {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, hidden: usize) -> Self {
        Dynamics {
            fc1: Linear::new(store, rng, "dynamics/fc1", d + 1, hidden),
            fc2: Linear::zeroed(store, "dynamics/fc2", hidden, d),
            d,
        }
    }

    pub fn step(&self, store: &ParamStore, z: &[f64], u: f64) -> (Vec<f64>, StepCache) {
        let mut input = Vec::with_capacity(self.d + 1);
        input.extend_from_slice(z);
        input.push(u);
        let mut hidden = self.fc1.forward(store, &input, 1);
        relu_inplace(&mut hidden);
        let delta = self.fc2.forward(store, &hidden, 1);
        let next = z.iter().zip(&delta).map(|(a, b)| a + b).collect();
        (next, StepCache { input, hidden })
    }

    /// Gradient with respect to `z` given the gradient of the next state.
    pub fn step_backward(&self, store: &ParamStore, cache: &StepCache, d_next: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut dh = self.fc2.backward(store, &cache.hidden, 1, d_next, grads);
        relu_backward(&mut dh, &cache.hidden);
        let dinput = self.fc1.backward(store, &cache.input, 1, &dh, grads);
        d_next.iter().zip(&dinput[..self.d]).map(|(a, b)| a + b).collect()
    }

    /// States `z(k+1) … z(k+steps)` with the action held constant.
    pub fn rollout(&self, store: &ParamStore, z0: &[f64], u: f64, steps: usize) -> Vec<Vec<f64>> {
        self.rollout_cached(store, z0, u, steps).0
    }

    pub fn rollout_cached(&self, store: &ParamStore, z0: &[f64], u: f64, steps: usize) -> (Vec<Vec<f64>>, Vec<StepCache>) {
        let mut states = Vec::with_capacity(steps);
        let mut caches = Vec::with_capacity(steps);
        let mut z = z0.to_vec();
        for _ in 0..steps {
            let (next, c) = self.step(store, &z, u);
            caches.push(c);
            states.push(next.clone());
            z = next;
        }
        (states, caches)
    }

    /// `d_states[h]` is the loss gradient at `z(k+h+1)`; returns the gradient
    /// at `z(k)`.
    pub fn rollout_backward(&self, store: &ParamStore, caches: &[StepCache], d_states: &[Vec<f64>], grads: &mut Grads) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        for (cache, ds) in caches.iter().zip(d_states).rev() {
            for (a, b) in g.iter_mut().zip(ds) {
                *a += b;
            }
            g = self.step_backward(store, cache, &g, grads);
        }
        g
    }
}
