//! Path-addressed parameter storage and matching gradient buffers.
//!
//! Values are held in `f64` for computation but every stored value is kept
//! exactly representable in `f32` (see [`ParamStore::round_to_f32`]), which
//! makes the 32-bit checkpoint format lossless.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimiser; counted by EWC and gradient clipping.
    Trainable,
    /// Running statistics; persisted but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Paths must be unique.
    pub fn add(&mut self, path: impl Into<String>, shape: &[usize], kind: ParamKind, data: Vec<f64>) -> ParamId {
        let path = path.into();
        assert!(self.id_of(&path).is_none(), "duplicate parameter path {path}");
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch for {path}");
        let data = data.into_iter().map(|x| x as f32 as f64).collect();
        self.params.push(Param {
            path,
            shape: shape.to_vec(),
            kind,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    /// Trainable tensor drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng>(&mut self, rng: &mut R, path: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(path, shape, ParamKind::Trainable, data)
    }

    pub fn constant(&mut self, path: impl Into<String>, shape: &[usize], value: f64, kind: ParamKind) -> ParamId {
        let n = shape.iter().product();
        self.add(path, shape, kind, vec![value; n])
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_of(&self, path: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.path == path).map(ParamId)
    }

    pub fn paths(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.path.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Snap every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for x in &mut p.data {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; buffers have empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    slots: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads {
            slots: store
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Trainable => vec![0.0; p.data.len()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0]
    }

    pub fn slots(&self) -> &[Vec<f64>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.slots
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.slots.iter_mut().flatten() {
            *x *= factor;
        }
    }

    /// Global l2 norm over all trainable entries.
    pub fn norm(&self) -> f64 {
        self.slots.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Sum a sequence of gradients in iteration order.
    pub fn sum<'a>(store: &ParamStore, parts: impl IntoIterator<Item = &'a Grads>) -> Grads {
        let mut total = Grads::zeros(store);
        for g in parts {
            total.add_assign(g);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn values_are_f32_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.uniform(&mut rng, "a/w", &[3, 4], 0.5);
        assert!(s.get(id).iter().all(|&x| x == x as f32 as f64));
        s.get_mut(id)[0] = 0.1;
        s.round_to_f32();
        assert_eq!(s.get(id)[0], 0.1f32 as f64);
    }

    #[test]
    fn grads_skip_buffers() {
        let mut s = ParamStore::new();
        let a = s.constant("w", &[2], 1.0, ParamKind::Trainable);
        let b = s.constant("running_mean", &[3], 0.0, ParamKind::Buffer);
        let mut g = Grads::zeros(&s);
        assert!(g.get(b).is_empty());
        g.get_mut(a).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(g.norm(), 5.0);
        assert_eq!(s.trainable_scalars(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_paths_panic() {
        let mut s = ParamStore::new();
        s.constant("w", &[1], 0.0, ParamKind::Trainable);
        s.constant("w", &[1], 0.0, ParamKind::Trainable);
    }
}
