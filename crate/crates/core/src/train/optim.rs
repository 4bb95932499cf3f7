//! Adam with decoupled weight decay, global-norm clipping and the early-stop rule.

use crate::net::{Grads, ParamKind, ParamStore};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam {
            lr,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable tensor; buffers are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads.slots()).zip(&mut self.m).zip(&mut self.v) {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                let decayed = *x - self.lr * self.weight_decay * *x;
                *x = (decayed - self.lr * update) as f32 as f64;
            }
        }
    }
}

/// Scale `grads` so their global ℓ2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once `patience` epochs have passed since the first occurrence of the
/// best (lowest) value. Ties are not improvements.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let Some(best) = best_index(history) else {
        return StopDecision::Continue;
    };
    if history.len() - 1 - best >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Index of the first minimum, ignoring NaN.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in history.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        if best.is_none_or(|b| x < history[b]) {
            best = Some(i);
        }
    }
    best.or(if history.is_empty() { None } else { Some(0) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", &[vals.len()], ParamKind::Trainable, vals.to_vec());
        s.add("b", &[1], ParamKind::Buffer, vec![3.0]);
        s
    }

    #[test]
    fn clip_examples() {
        let s = store(&[0.0, 0.0]);
        let mut g = Grads::zeros(&s);
        g.slots_mut()[0].copy_from_slice(&[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
        assert_eq!(g.slots()[0], vec![0.3, 0.4]);
        g.slots_mut()[0].copy_from_slice(&[1.2, 1.6]);
        assert_eq!(clip_gradients(&mut g, 1.0), 2.0);
        assert!((g.slots()[0][0] - 0.6).abs() < 1e-12 && (g.slots()[0][1] - 0.8).abs() < 1e-12);
        assert!((g.norm() - 1.0).abs() < 1e-9);
        let mut z = Grads::zeros(&s);
        assert_eq!(clip_gradients(&mut z, 1.0), 0.0);
        assert_eq!(z.slots()[0], vec![0.0, 0.0]);
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop_check(&[0.02, 0.019, 0.018], 15), StopDecision::Continue);
        // Epochs are 1-based in prose: best at epoch 3.
        let mut h = vec![0.05, 0.04, 0.01];
        h.extend(std::iter::repeat_n(0.02, 15));
        assert_eq!(h.len(), 18);
        assert_eq!(early_stop_check(&h, 15), StopDecision::Stop);
        assert_eq!(early_stop_check(&h[..17], 15), StopDecision::Continue);
        let ties = [0.01, 0.01, 0.01];
        assert_eq!(early_stop_check(&ties, 2), StopDecision::Stop);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store(&[1.0, -1.0]);
        let mut g = Grads::zeros(&s);
        g.slots_mut()[0].copy_from_slice(&[0.5, -2.0]);
        let mut opt = Adam::new(&s, 0.01, 0.0);
        opt.step(&mut s, &g);
        let w = s.get(s.id_of("w").unwrap());
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
        assert_eq!(s.get(s.id_of("b").unwrap()), &[3.0]);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut s = store(&[2.0]);
        let g = Grads::zeros(&s);
        let mut opt = Adam::new(&s, 0.1, 0.5);
        opt.step(&mut s, &g);
        assert!((s.get(s.id_of("w").unwrap())[0] - 1.9).abs() < 1e-6);
    }
}
