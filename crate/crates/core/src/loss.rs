//! Training objective: data fit, physics consistency and the EWC anchor.

use std::collections::HashMap;
use std::ops::AddAssign;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::net::checkpoint::{read_tensors, write_tensors, FileKind, Header, FORMAT_VERSION};
use crate::net::{Architecture, Grads, NetConfig, OutputGrad, Param, ParamKind, ParamStore, Variant, WindowOutput};

/// Denominator floor for the relative voltage check, V.
pub const V_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_phys: f64,
    pub lambda_ewc: f64,
    /// Hinge margin of the monotonicity term, SOH units.
    pub epsilon_mono: f64,
    /// Exponent of the resistance power law.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_phys: 0.1,
            lambda_ewc: 0.4,
            epsilon_mono: 0.005,
            gamma: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_phys, self.lambda_ewc, self.epsilon_mono, self.gamma];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.gamma == 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Which optional terms enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossFlags {
    pub physics: bool,
    pub ewc: bool,
}

impl From<Variant> for LossFlags {
    fn from(v: Variant) -> Self {
        LossFlags {
            physics: v.physics(),
            ewc: v.ewc(),
        }
    }
}

/// Unweighted component values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub data: f64,
    pub phys: f64,
    pub ewc: f64,
}

/// Weighted total plus its unweighted components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data: f64,
    pub phys: f64,
    pub ewc: f64,
}

impl LossBreakdown {
    pub fn scaled(self, f: f64) -> Self {
        LossBreakdown {
            total: self.total * f,
            data: self.data * f,
            phys: self.phys * f,
            ewc: self.ewc * f,
        }
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.data += o.data;
        self.phys += o.phys;
        self.ewc += o.ewc;
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "predicted trajectory has {} values, target has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Squared error on current SOH plus the mean squared error over the
/// future trajectory. An empty future contributes nothing.
pub fn data_loss(now_hat: f64, now: f64, future_hat: &[f64], future: &[f64]) -> Result<f64> {
    check_len(future_hat, future)?;
    let mut l = (now_hat - now).powi(2);
    if !future.is_empty() {
        l += future_hat.iter().zip(future).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / future.len() as f64;
    }
    Ok(l)
}

/// Gradient of [`data_loss`] with respect to `(now_hat, future_hat)`.
pub fn data_loss_grad(now_hat: f64, now: f64, future_hat: &[f64], future: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(future_hat, future)?;
    let n = future.len().max(1) as f64;
    let d_future = future_hat.iter().zip(future).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((2.0 * (now_hat - now), d_future))
}

/// Mean squared hinge on consecutive increases, `max(0, s[h+1] - s[h] + ε)²`.
pub fn monotonicity_loss(traj: &[f64], epsilon: f64) -> f64 {
    if traj.len() < 2 {
        return 0.0;
    }
    let pairs = traj.len() - 1;
    traj.windows(2).map(|p| (p[1] - p[0] + epsilon).max(0.0).powi(2)).sum::<f64>() / pairs as f64
}

pub fn monotonicity_grad(traj: &[f64], epsilon: f64) -> Vec<f64> {
    let mut g = vec![0.0; traj.len()];
    if traj.len() < 2 {
        return g;
    }
    let pairs = (traj.len() - 1) as f64;
    for h in 0..traj.len() - 1 {
        let m = traj[h + 1] - traj[h] + epsilon;
        if m > 0.0 {
            let d = 2.0 * m / pairs;
            g[h + 1] += d;
            g[h] -= d;
        }
    }
    g
}

/// SOH implied by the resistance ratio, `(r0 / r_last)^(1/γ)`.
pub fn soh_from_resistance(r_last: f64, r0: f64, gamma: f64) -> Result<f64> {
    if !(r_last > 0.0 && r0 > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "resistance inversion needs positive inputs (r_last={r_last}, r0={r0}, gamma={gamma})"
        )));
    }
    Ok((r0 / r_last).powf(1.0 / gamma))
}

pub fn resistance_consistency_loss(now_hat: f64, r_last: f64, r0: f64, gamma: f64) -> Result<f64> {
    Ok((now_hat - soh_from_resistance(r_last, r0, gamma)?).powi(2))
}

pub fn resistance_consistency_grad(now_hat: f64, r_last: f64, r0: f64, gamma: f64) -> Result<f64> {
    Ok(2.0 * (now_hat - soh_from_resistance(r_last, r0, gamma)?))
}

/// `((ΔV − I·R) / max(ΔV, V_FLOOR))²`.
pub fn voltage_mismatch(dv_obs: f64, current: f64, resistance: f64) -> f64 {
    ((dv_obs - current * resistance) / dv_obs.max(V_FLOOR)).powi(2)
}

/// Relative ohmic-drop check on the last observed cycle. It depends on
/// measurements only, so its gradient with respect to predictions is zero.
pub fn voltage_consistency_loss(window: &Window) -> f64 {
    voltage_mismatch(window.voltage_drop, window.action, window.resistance_last)
}

/// Unweighted sum of the monotonicity, resistance and voltage terms.
pub fn physics_loss(traj_hat: &[f64], now_hat: f64, window: &Window, weights: &LossWeights) -> Result<f64> {
    Ok(monotonicity_loss(traj_hat, weights.epsilon_mono)
        + resistance_consistency_loss(now_hat, window.resistance_last, window.resistance_initial, weights.gamma)?
        + voltage_consistency_loss(window))
}

pub fn total_loss(c: &LossComponents, weights: &LossWeights, flags: LossFlags) -> f64 {
    let mut l = c.data;
    if flags.physics {
        l += weights.lambda_phys * c.phys;
    }
    if flags.ewc {
        l += weights.lambda_ewc * c.ewc;
    }
    l
}

/// Per-window objective (everything except EWC, which acts on parameters)
/// and its gradient with respect to the model outputs.
pub fn window_objective(
    window: &Window,
    out: &WindowOutput,
    weights: &LossWeights,
    flags: LossFlags,
) -> Result<(LossBreakdown, OutputGrad)> {
    let (fut_hat, fut): (&[f64], &[f64]) = match &out.soh_future {
        Some(f) => (f, &window.soh_future),
        None => (&[], &[]),
    };
    let data = data_loss(out.soh_now, window.soh_now, fut_hat, fut)?;
    let (mut d_now, mut d_future) = data_loss_grad(out.soh_now, window.soh_now, fut_hat, fut)?;
    let mut phys = 0.0;
    if flags.physics {
        phys = physics_loss(fut_hat, out.soh_now, window, weights)?;
        let lp = weights.lambda_phys;
        d_now += lp * resistance_consistency_grad(
            out.soh_now,
            window.resistance_last,
            window.resistance_initial,
            weights.gamma,
        )?;
        for (g, m) in d_future.iter_mut().zip(monotonicity_grad(fut_hat, weights.epsilon_mono)) {
            *g += lp * m;
        }
    }
    let components = LossComponents { data, phys, ewc: 0.0 };
    Ok((
        LossBreakdown {
            total: total_loss(&components, weights, flags),
            data,
            phys,
            ewc: 0.0,
        },
        OutputGrad { d_now, d_future },
    ))
}

/// Diagonal Fisher importances and the anchor parameters they were
/// captured with, keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    pub entries: Vec<FisherEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub fisher: Vec<f64>,
    pub anchor: Vec<f64>,
}

/// `F_i = (1/N) Σ_n g_n,i²` over the gradients returned by `grad_fn` for
/// batches `0..n_batches`, visited in order.
pub fn estimate_fisher<F>(params: &ParamStore, n_batches: usize, mut grad_fn: F) -> Result<FisherDiagonal>
where
    F: FnMut(usize) -> Result<Grads>,
{
    if n_batches == 0 {
        return Err(Error::InvalidInput("Fisher estimation needs at least one batch".into()));
    }
    let trainable: Vec<_> = params.ids().filter(|&id| params.param(id).kind == ParamKind::Trainable).collect();
    let mut acc: Vec<Vec<f64>> = trainable.iter().map(|&id| vec![0.0; params.get(id).len()]).collect();
    for b in 0..n_batches {
        let g = grad_fn(b)?;
        for (a, &id) in acc.iter_mut().zip(&trainable) {
            for (x, gi) in a.iter_mut().zip(g.get(id)) {
                *x += gi * gi;
            }
        }
    }
    let n = n_batches as f64;
    Ok(FisherDiagonal {
        entries: trainable
            .iter()
            .zip(acc)
            .map(|(&id, a)| {
                let p = params.param(id);
                FisherEntry {
                    path: p.path.clone(),
                    shape: p.shape.clone(),
                    fisher: a.into_iter().map(|x| x / n).collect(),
                    anchor: p.data.clone(),
                }
            })
            .collect(),
    })
}

impl FisherDiagonal {
    fn matched<'a>(&'a self, params: &'a ParamStore) -> Result<Vec<(&'a FisherEntry, &'a Param)>> {
        let by_path: HashMap<&str, &Param> = params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| (p.path.as_str(), p))
            .collect();
        if by_path.len() != self.entries.len() {
            return Err(Error::PathMismatch(format!(
                "Fisher covers {} tensors, model has {} trainable tensors",
                self.entries.len(),
                by_path.len()
            )));
        }
        self.entries
            .iter()
            .map(|e| match by_path.get(e.path.as_str()) {
                Some(p) if p.shape == e.shape => Ok((e, *p)),
                Some(_) => Err(Error::PathMismatch(format!("shape of {} differs", e.path))),
                None => Err(Error::PathMismatch(format!("model has no parameter {}", e.path))),
            })
            .collect()
    }

    /// Sum of all importances.
    pub fn total(&self) -> f64 {
        self.entries.iter().flat_map(|e| &e.fisher).sum()
    }

    pub fn save(&self, path: &Path, architecture: Architecture, config: &NetConfig) -> Result<()> {
        let header = Header {
            kind: FileKind::Fisher,
            version: FORMAT_VERSION,
            architecture,
            net_config: config.clone(),
        };
        let mut tensors = Vec::with_capacity(2 * self.entries.len());
        for e in &self.entries {
            for (prefix, data) in [("fisher", &e.fisher), ("anchor", &e.anchor)] {
                tensors.push(Param {
                    path: format!("{prefix}/{}", e.path),
                    shape: e.shape.clone(),
                    kind: ParamKind::Buffer,
                    data: data.clone(),
                });
            }
        }
        write_tensors(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<(Header, FisherDiagonal)> {
        let (header, tensors) = read_tensors(path)?;
        if header.kind != FileKind::Fisher {
            return Err(Error::format(path, "file holds a model, not a Fisher estimate"));
        }
        if tensors.len() % 2 != 0 {
            return Err(Error::format(path, "unpaired Fisher/anchor tensors"));
        }
        let mut entries = Vec::with_capacity(tensors.len() / 2);
        for pair in tensors.chunks_exact(2) {
            let (f, a) = (&pair[0], &pair[1]);
            let name = f.path.strip_prefix("fisher/");
            if name.is_none() || a.path.strip_prefix("anchor/") != name || f.shape != a.shape {
                return Err(Error::format(path, format!("unexpected tensor pair {} / {}", f.path, a.path)));
            }
            entries.push(FisherEntry {
                path: name.unwrap_or_default().to_string(),
                shape: f.shape.clone(),
                fisher: f.data.clone(),
                anchor: a.data.clone(),
            });
        }
        Ok((header, FisherDiagonal { entries }))
    }
}

/// `Σ_i F_i (θ_i − θ*_i)²`, matched by path.
pub fn ewc_penalty(params: &ParamStore, fisher: &FisherDiagonal) -> Result<f64> {
    Ok(fisher
        .matched(params)?
        .iter()
        .map(|(e, p)| {
            e.fisher
                .iter()
                .zip(&p.data)
                .zip(&e.anchor)
                .map(|((f, t), a)| f * (t - a).powi(2))
                .sum::<f64>()
        })
        .sum())
}

/// Gradient `2 F (θ − θ*)` of [`ewc_penalty`].
pub fn ewc_gradient(params: &ParamStore, fisher: &FisherDiagonal) -> Result<Grads> {
    let matched = fisher.matched(params)?;
    let mut grads = Grads::zeros(params);
    for (e, p) in matched {
        let id = params.id_of(&p.path).expect("matched path");
        for (((g, f), t), a) in grads.get_mut(id).iter_mut().zip(&e.fisher).zip(&p.data).zip(&e.anchor) {
            *g = 2.0 * f * (t - a);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn data_loss_examples() {
        assert_eq!(data_loss(0.9, 0.9, &[0.8, 0.7], &[0.8, 0.7]).unwrap(), 0.0);
        assert!((data_loss(1.0, 0.9, &[0.8], &[0.8]).unwrap() - 0.01).abs() < 1e-15);
        assert!((data_loss(0.9, 0.9, &[0.9, 0.8], &[0.8, 0.7]).unwrap() - 0.01).abs() < 1e-15);
        assert!(data_loss(0.9, 0.9, &[0.9], &[0.8, 0.7]).is_err());
    }

    #[test]
    fn monotonicity_examples() {
        assert_eq!(monotonicity_loss(&[1.00, 0.99, 0.98], 0.005), 0.0);
        assert!((monotonicity_loss(&[0.9, 0.9, 0.9], 0.005) - 2.5e-5).abs() < 1e-15);
        assert!((monotonicity_loss(&[0.90, 0.91], 0.005) - 2.25e-4).abs() < 1e-12);
        assert_eq!(monotonicity_loss(&[0.9], 0.005), 0.0);
    }

    #[test]
    fn resistance_examples() {
        assert_eq!(soh_from_resistance(0.02, 0.02, 0.75).unwrap(), 1.0);
        assert!((soh_from_resistance(0.04, 0.02, 0.75).unwrap() - 0.5f64.powf(4.0 / 3.0)).abs() < 1e-15);
        assert!((soh_from_resistance(1.25, 1.0, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!(soh_from_resistance(0.0, 1.0, 1.0).is_err());
        assert!(soh_from_resistance(1.0, -1.0, 1.0).is_err());
        assert!(soh_from_resistance(1.0, 1.0, 0.0).is_err());
        // implied 0.9 (gamma 1), predicted 1.0
        assert!((resistance_consistency_loss(1.0, 1.0 / 0.9, 1.0, 1.0).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn voltage_examples() {
        assert_eq!(voltage_mismatch(0.1, 5.0, 0.02), 0.0);
        assert!((voltage_mismatch(0.2, 5.0, 0.02) - 0.25).abs() < 1e-12);
        let flat = voltage_mismatch(0.0, 5.0, 0.02);
        assert!(flat.is_finite());
        assert!((flat - 4.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_flags() {
        let c = LossComponents {
            data: 0.01,
            phys: 0.02,
            ewc: 5.0,
        };
        let w = LossWeights::default();
        assert_eq!(total_loss(&c, &w, Variant::Wm.into()), 0.01);
        assert!((total_loss(&c, &w, Variant::Piwm.into()) - 0.012).abs() < 1e-15);
        assert!((total_loss(&c, &w, Variant::PiwmEwc.into()) - 2.012).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &w, Variant::PiwmEwc.into()), 0.0);
    }

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (p, v) in values {
            s.add(*p, &[v.len()], ParamKind::Trainable, v.clone());
        }
        s
    }

    #[test]
    fn ewc_examples() {
        let anchor = store_with(&[("a", vec![0.5]), ("b", vec![0.25])]);
        let mut fisher = estimate_fisher(&anchor, 1, |_| Ok(Grads::zeros(&anchor))).unwrap();
        assert_eq!(fisher.total(), 0.0);
        fisher.entries[0].fisher = vec![1.0];
        fisher.entries[1].fisher = vec![2.0];
        assert_eq!(ewc_penalty(&anchor, &fisher).unwrap(), 0.0);
        let moved = store_with(&[("a", vec![0.6]), ("b", vec![0.35])]);
        assert!((ewc_penalty(&moved, &fisher).unwrap() - 0.03).abs() < 1e-7);
        let reordered = store_with(&[("b", vec![0.35]), ("a", vec![0.6])]);
        assert_eq!(ewc_penalty(&moved, &fisher).unwrap(), ewc_penalty(&reordered, &fisher).unwrap());
        let other = store_with(&[("a", vec![0.6]), ("c", vec![0.35])]);
        assert!(matches!(ewc_penalty(&other, &fisher), Err(Error::PathMismatch(_))));
    }

    #[test]
    fn fisher_closed_forms() {
        let s = store_with(&[("w", vec![1.0])]);
        let id = s.id_of("w").unwrap();
        let gs = [0.5, -1.5];
        let f = estimate_fisher(&s, 2, |b| {
            let mut g = Grads::zeros(&s);
            g.get_mut(id)[0] = gs[b];
            Ok(g)
        })
        .unwrap();
        assert!((f.entries[0].fisher[0] - (0.25 + 2.25) / 2.0).abs() < 1e-15);
        let c = estimate_fisher(&s, 3, |_| {
            let mut g = Grads::zeros(&s);
            g.get_mut(id)[0] = 0.3;
            Ok(g)
        })
        .unwrap();
        assert!((c.entries[0].fisher[0] - 0.09).abs() < 1e-15);
        assert!(estimate_fisher(&s, 0, |_| Ok(Grads::zeros(&s))).is_err());
    }

    #[test]
    fn fisher_file_round_trip() {
        let s = store_with(&[("w", vec![1.0, 2.0]), ("v", vec![0.5])]);
        let f = estimate_fisher(&s, 1, |_| {
            let mut g = Grads::zeros(&s);
            g.slots_mut()[0][1] = 0.5;
            Ok(g)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fisher.bin");
        f.save(&path, Architecture::WorldModel, &NetConfig::default()).unwrap();
        let (h, back) = FisherDiagonal::load(&path).unwrap();
        assert_eq!(h.kind, FileKind::Fisher);
        assert_eq!(back, f);
    }

    fn brute_mono(t: &[f64], eps: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..t.len().saturating_sub(1) {
            let m = t[i + 1] - t[i] + eps;
            if m > 0.0 {
                s += m * m;
            }
        }
        if t.len() < 2 {
            0.0
        } else {
            s / (t.len() - 1) as f64
        }
    }

    proptest! {
        #[test]
        fn monotonicity_matches_brute_force(t in prop::collection::vec(0.5f64..1.1, 0..40), eps in 0.0f64..0.02) {
            let l = monotonicity_loss(&t, eps);
            prop_assert!(l >= 0.0);
            prop_assert!((l - brute_mono(&t, eps)).abs() < 1e-15);
            let decreasing = t.windows(2).all(|p| p[0] - p[1] >= eps);
            if decreasing {
                prop_assert_eq!(l, 0.0);
            }
            if t.windows(2).any(|p| p[1] > p[0]) {
                prop_assert!(l > 0.0);
            }
        }

        #[test]
        fn resistance_inversion_round_trip(s in 0.5f64..1.1, gi in 0usize..3, r0 in 0.005f64..0.1) {
            let gamma = [0.5, 0.75, 1.0][gi];
            let r = r0 * (1.0 / s).powf(gamma);
            prop_assert!((soh_from_resistance(r, r0, gamma).unwrap() - s).abs() < 1e-12);
        }

        #[test]
        fn terms_nonnegative(a in -2.0f64..2.0, b in -2.0f64..2.0, dv in -1.0f64..1.0, i in 0.0f64..10.0, r in 0.001f64..0.1) {
            prop_assert!(data_loss(a, b, &[a], &[b]).unwrap() >= 0.0);
            prop_assert!(resistance_consistency_loss(a, r, 0.02, 0.75).unwrap() >= 0.0);
            prop_assert!(voltage_mismatch(dv, i, r) >= 0.0);
        }
    }
}
