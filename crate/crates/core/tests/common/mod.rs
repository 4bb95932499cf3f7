//! Shared fixtures and numerical oracles for the integration and
//! acceptance tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sohwm::data::{build_all_windows, CellRecord, Window};
use sohwm::loss::{
    data_loss, data_loss_grad, estimate_fisher, ewc_gradient, ewc_penalty, monotonicity_grad, monotonicity_loss,
    resistance_consistency_grad, resistance_consistency_loss, voltage_consistency_loss, window_objective, LossBreakdown,
    LossFlags, LossWeights,
};
use sohwm::net::{Architecture, Grads, Model, NetConfig, OutputGrad, ParamKind, ParamStore, WindowOutput};
use sohwm::synth::{generate_fleet, FleetRanges};
use sohwm::{Parallelism, Result};

/// Network small enough for finite-difference checks.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        d_model: 8,
        window: 6,
        horizon: 4,
        patch_len: 3,
        patch_stride: 3,
        layers: 2,
        heads: 2,
        ff_width: 12,
        conv_channels: [3, 4, 5],
        conv_kernels: [5, 3, 3],
        conv_stride: 2,
        t_max: 32,
        mlp_hidden: 6,
        action_scale: 8.8,
        lstm_hidden: 5,
        lstm_layers: 2,
    }
}

pub fn tiny_ranges() -> FleetRanges {
    FleetRanges {
        lifetime: (24, 30),
        samples_per_cycle: 28,
        t_max: 32,
        ..FleetRanges::default()
    }
}

pub fn tiny_cells(seed: u64) -> Vec<CellRecord> {
    generate_fleet(3, &tiny_ranges(), seed).expect("tiny fleet")
}

pub fn windows_of(cells: &[CellRecord], net: &NetConfig) -> Vec<Window> {
    let idx: Vec<usize> = (0..cells.len()).collect();
    build_all_windows(cells, &idx, net.window, net.horizon)
}

/// Desk-scale network used by the training-based checks.
pub fn desk_net() -> NetConfig {
    NetConfig {
        d_model: 16,
        window: 30,
        horizon: 80,
        patch_len: 6,
        patch_stride: 3,
        layers: 2,
        heads: 2,
        ff_width: 32,
        conv_channels: [4, 8, 16],
        conv_kernels: [7, 5, 3],
        conv_stride: 2,
        t_max: 64,
        mlp_hidden: 32,
        action_scale: 8.8,
        lstm_hidden: 16,
        lstm_layers: 2,
    }
}

pub fn desk_ranges() -> FleetRanges {
    FleetRanges {
        lifetime: (150, 260),
        samples_per_cycle: 60,
        t_max: 64,
        ..FleetRanges::default()
    }
}

/// Outcome of comparing analytic and numerical derivatives.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Scalars eligible for checking (the sample is capped at this).
    pub available: usize,
    pub checked: usize,
    /// Sampled points rejected as non-differentiable.
    pub skipped: usize,
    pub failures: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn new(name: impl Into<String>) -> Self {
        GradCheck {
            name: name.into(),
            available: usize::MAX,
            checked: 0,
            skipped: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    /// Relative error with a small absolute floor for vanishing derivatives.
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs());
        let err = (analytic - numeric).abs();
        let rel = err / scale.max(1e-6);
        self.checked += 1;
        self.worst = self.worst.max(rel);
        if rel > 1e-4 {
            if std::env::var_os("GRADCHECK_DEBUG").is_some() {
                eprintln!("{}: analytic {analytic:e} numeric {numeric:e}", self.name);
            }
            self.failures += 1;
        }
    }

    pub fn ok(&self, min_checked: usize) -> bool {
        self.failures == 0 && self.checked >= min_checked.min(self.available)
    }
}

fn central<F: FnMut(f64) -> f64>(x: f64, h: f64, mut f: F) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// A smooth objective over the outputs with random coefficients, so every
/// output feeds the gradient.
#[derive(Clone)]
struct Probe {
    a: f64,
    b: Vec<f64>,
}

impl Probe {
    fn new(rng: &mut ChaCha8Rng, h: usize) -> Self {
        Probe {
            a: rng.gen_range(-1.0..1.0),
            b: (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn eval(&self, out: &WindowOutput) -> (f64, OutputGrad) {
        let mut l = self.a * out.soh_now + 0.5 * out.soh_now * out.soh_now;
        let mut d_future = Vec::new();
        if let Some(f) = &out.soh_future {
            for (b, y) in self.b.iter().zip(f) {
                l += b * y + 0.25 * y * y;
                d_future.push(b + 0.5 * y);
            }
        }
        (
            l,
            OutputGrad {
                d_now: self.a + out.soh_now,
                d_future,
            },
        )
    }
}

fn batch_loss(model: &Model, cells: &[CellRecord], ws: &[&Window], probe: &Probe) -> f64 {
    model
        .predict(cells, ws, Parallelism::Sequential)
        .expect("predict")
        .iter()
        .map(|o| probe.eval(o).0)
        .sum()
}

fn block_of(path: &str) -> String {
    let mut parts = path.split('/');
    let top = parts.next().unwrap_or_default();
    match top {
        "cycle_encoder" | "dynamics" | "head" | "direct_head" | "lstm_head" => {
            let sub = parts.next().unwrap_or_default();
            format!("{top}/{sub}")
        }
        "window_encoder" | "lstm" => {
            let a = parts.next().unwrap_or_default();
            match parts.next() {
                Some(b) => format!("{top}/{a}/{b}"),
                None => format!("{top}/{a}"),
            }
        }
        _ => top.to_string(),
    }
}

/// Randomise every trainable tensor (including zero-initialised ones) and
/// give the normalisation buffers non-trivial statistics.
fn perturb(model: &mut Model, cells: &[CellRecord], ws: &[&Window], rng: &mut ChaCha8Rng) {
    for p in model.params.iter_mut() {
        if p.kind == ParamKind::Trainable && p.data.iter().all(|&x| x == 0.0) {
            for x in &mut p.data {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let flags = LossFlags::default();
    let w = LossWeights::default();
    if let Ok(out) = model.batch_gradients(cells, ws, Parallelism::Sequential, &|w0, o| {
        window_objective(w0, o, &w, flags)
    }) {
        if let Some(stats) = out.stats {
            model.update_norm_stats(&stats);
        }
    }
}

/// Finite-difference check of every parameter block of `arch`, sampling up
/// to `per_block` scalars from each block.
pub fn check_network_blocks(arch: Architecture, seed: u64, per_block: usize) -> Vec<GradCheck> {
    let net = tiny_net();
    let cells = tiny_cells(seed);
    let windows = windows_of(&cells, &net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let ws: Vec<&Window> = windows.iter().step_by(windows.len().div_ceil(3).max(1)).take(3).collect();
    let mut model = Model::new(&net, arch, seed).expect("model");
    perturb(&mut model, &cells, &ws, &mut rng);
    let probe = Probe::new(&mut rng, net.horizon);
    let analytic = model
        .batch_gradients(&cells, &ws, Parallelism::Sequential, &|_, o| {
            let (l, g) = probe.eval(o);
            Ok((
                LossBreakdown {
                    total: l,
                    data: l,
                    ..LossBreakdown::default()
                },
                g,
            ))
        })
        .expect("gradients");

    let mut blocks: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (pi, p) in model.params.iter().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let b = block_of(&p.path);
        let entry = match blocks.iter_mut().find(|(n, _)| *n == b) {
            Some(e) => e,
            None => {
                blocks.push((b, Vec::new()));
                blocks.last_mut().expect("pushed")
            }
        };
        entry.1.extend((0..p.data.len()).map(|j| (pi, j)));
    }

    let ids: Vec<_> = model.params.ids().collect();
    let mut out = Vec::new();
    for (name, mut scalars) in blocks {
        let mut check = GradCheck::new(format!("{arch:?}:{name}"));
        check.available = scalars.len();
        scalars.shuffle(&mut rng);
        for &(pi, j) in &scalars {
            if check.checked >= per_block {
                break;
            }
            let id = ids[pi];
            let x0 = model.params.get(id)[j];
            let mut fd = |h: f64| {
                let v = central(x0, h, |x| {
                    model.params.get_mut(id)[j] = x;
                    batch_loss(&model, &cells, &ws, &probe)
                });
                model.params.get_mut(id)[j] = x0;
                v
            };
            let (coarse, fine) = (fd(1e-5), fd(2e-6));
            // A ReLU switching inside the stencil makes the two step sizes
            // disagree; such points are not differentiable and are skipped.
            if (coarse - fine).abs() > 1e-5 * coarse.abs().max(fine.abs()).max(1e-4) {
                if std::env::var_os("GRADCHECK_DEBUG").is_some() { eprintln!("skip {} {j}: {coarse:e} {fine:e} an {:e}", check.name, analytic.grads.get(id)[j]); }
                check.skipped += 1;
                continue;
            }
            check.record(analytic.grads.get(id)[j], coarse);
        }
        check.available = check.available.saturating_sub(check.skipped);
        out.push(check);
    }
    out
}

fn rand_traj(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.7..1.05)).collect()
}

/// Finite-difference checks of every loss term with respect to its
/// predicted inputs (and of the EWC penalty with respect to parameters).
pub fn check_loss_terms(seed: u64, instances: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut data = GradCheck::new("loss:data");
    let mut mono = GradCheck::new("loss:monotonicity");
    let mut ir = GradCheck::new("loss:resistance");
    let mut volt = GradCheck::new("loss:voltage");
    let mut ewc = GradCheck::new("loss:ewc");
    let mut total = GradCheck::new("loss:window_objective");
    let net = tiny_net();
    let cells = tiny_cells(seed);
    let windows = windows_of(&cells, &net);
    let weights = LossWeights::default();

    for i in 0..instances {
        let n = rng.gen_range(2..9);
        let now_hat = rng.gen_range(0.7..1.05);
        let now = rng.gen_range(0.7..1.05);
        let fut_hat = rand_traj(&mut rng, n);
        let fut = rand_traj(&mut rng, n);
        let (g_now, g_fut) = data_loss_grad(now_hat, now, &fut_hat, &fut).expect("lengths");
        data.record(g_now, central(now_hat, h, |x| data_loss(x, now, &fut_hat, &fut).unwrap()));
        for k in 0..n {
            let num = central(fut_hat[k], h, |x| {
                let mut f = fut_hat.clone();
                f[k] = x;
                data_loss(now_hat, now, &f, &fut).unwrap()
            });
            data.record(g_fut[k], num);
        }

        // Keep consecutive differences away from the hinge corner.
        let mut traj = rand_traj(&mut rng, n);
        for k in 1..n {
            if (traj[k] - traj[k - 1] + weights.epsilon_mono).abs() < 1e-4 {
                traj[k] += 3e-4;
            }
        }
        let g = monotonicity_grad(&traj, weights.epsilon_mono);
        for k in 0..n {
            let num = central(traj[k], h * 0.1, |x| {
                let mut t = traj.clone();
                t[k] = x;
                monotonicity_loss(&t, weights.epsilon_mono)
            });
            mono.record(g[k], num);
        }

        let r0 = rng.gen_range(0.01..0.03);
        let r = r0 * rng.gen_range(1.0..1.4);
        let gamma = [0.5, 0.75, 1.0][i % 3];
        ir.record(
            resistance_consistency_grad(now_hat, r, r0, gamma).unwrap(),
            central(now_hat, h, |x| resistance_consistency_loss(x, r, r0, gamma).unwrap()),
        );

        let w = &windows[i % windows.len()];
        // The voltage term reads measurements only: zero derivative with
        // respect to every prediction.
        let v0 = voltage_consistency_loss(w);
        volt.record(0.0, central(now_hat, h, |_| voltage_consistency_loss(w)));
        assert!(v0.is_finite() && v0 >= 0.0);

        let out = WindowOutput {
            soh_now: now_hat,
            soh_future: Some(rand_traj(&mut rng, w.horizon())),
            latent: None,
        };
        for flags in [LossFlags::default(), LossFlags { physics: true, ewc: false }] {
            let (_, g) = window_objective(w, &out, &weights, flags).unwrap();
            let num_now = central(out.soh_now, h, |x| {
                let mut o = out.clone();
                o.soh_now = x;
                window_objective(w, &o, &weights, flags).unwrap().0.total
            });
            total.record(g.d_now, num_now);
            let k = i % w.horizon();
            let num_f = central(out.soh_future.as_ref().unwrap()[k], h * 0.1, |x| {
                let mut o = out.clone();
                o.soh_future.as_mut().unwrap()[k] = x;
                window_objective(w, &o, &weights, flags).unwrap().0.total
            });
            total.record(g.d_future[k], num_f);
        }

        let mut store = ParamStore::new();
        store.add("a", &[3], ParamKind::Trainable, rand_traj(&mut rng, 3));
        store.add("b", &[2], ParamKind::Trainable, rand_traj(&mut rng, 2));
        let fg: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fisher = estimate_fisher(&store, 1, |_| {
            let mut g = Grads::zeros(&store);
            g.slots_mut()[0].copy_from_slice(&fg[..3]);
            g.slots_mut()[1].copy_from_slice(&fg[3..]);
            Ok(g)
        })
        .unwrap();
        for p in store.iter_mut() {
            for x in &mut p.data {
                *x += rng.gen_range(-0.2..0.2);
            }
        }
        let g = ewc_gradient(&store, &fisher).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            for j in 0..store.get(id).len() {
                let x0 = store.get(id)[j];
                let num = central(x0, h, |x| {
                    store.get_mut(id)[j] = x;
                    ewc_penalty(&store, &fisher).unwrap()
                });
                store.get_mut(id)[j] = x0;
                ewc.record(g.get(id)[j], num);
            }
        }
    }
    vec![data, mono, ir, volt, ewc, total]
}

pub fn tiny_result_ok(checks: &[GradCheck], min: usize) -> Result<bool> {
    Ok(checks.iter().all(|c| c.ok(min)))
}
