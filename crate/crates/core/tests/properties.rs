mod common;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{tiny_cells, tiny_net, windows_of};
use sohwm::data::Window;
use sohwm::eval::latent_pca;
use sohwm::net::{ActionVector, Architecture, LatentState, Model, ParamKind, Variant};
use sohwm::Parallelism;

fn random_latent(rng: &mut ChaCha8Rng, d: usize) -> LatentState {
    LatentState((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn scramble_dynamics(model: &mut Model, rng: &mut ChaCha8Rng) {
    for p in model.params.iter_mut().filter(|p| p.path.starts_with("dynamics/")) {
        for x in &mut p.data {
            *x = rng.gen_range(-0.4..0.4);
        }
    }
}

#[test]
fn zero_transition_is_identity() {
    let net = tiny_net();
    let mut model = Model::new(&net, Architecture::WorldModel, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = random_latent(&mut rng, net.d_model);
    let u = ActionVector::from_current(5.5, &net);
    // Fresh models already have a zero output layer.
    assert!(model.rollout(&z0, u, 80).unwrap().iter().all(|z| *z == z0));

    scramble_dynamics(&mut model, &mut rng);
    assert_ne!(model.transition(&z0, u).unwrap(), z0);
    for p in model.params.iter_mut().filter(|p| p.path.starts_with("dynamics/")) {
        p.data.iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(model.transition(&z0, u).unwrap(), z0);
    let states = model.rollout(&z0, u, 80).unwrap();
    assert_eq!(states.len(), 80);
    assert!(states.iter().all(|z| *z == z0));
}

#[test]
fn zero_transition_predicts_flat_trajectory() {
    let net = tiny_net();
    let cells = tiny_cells(4);
    let windows = windows_of(&cells, &net);
    let model = Model::new(&net, Architecture::WorldModel, 5).unwrap();
    for w in windows.iter().take(5) {
        let (now, future) = model.forward_trajectory(&cells, w).unwrap();
        assert_eq!(future.len(), net.horizon);
        assert!(future.iter().all(|&s| s == now));
    }
}

#[test]
fn rollout_is_compositional() {
    let net = tiny_net();
    let mut model = Model::new(&net, Architecture::WorldModel, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    scramble_dynamics(&mut model, &mut rng);
    for _ in 0..10 {
        let z0 = random_latent(&mut rng, net.d_model);
        let u = ActionVector::from_current(rng.gen_range(3.0..7.0), &net);
        let whole = model.rollout(&z0, u, 10).unwrap();
        let first = model.rollout(&z0, u, 5).unwrap();
        let second = model.rollout(first.last().unwrap(), u, 5).unwrap();
        for (a, b) in whole[9].0.iter().zip(&second[4].0) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
        }
    }
}

#[test]
fn census_is_stable_and_variant_specific() {
    let net = tiny_net();
    for arch in [Architecture::WorldModel, Architecture::Direct, Architecture::Lstm] {
        let a = Model::new(&net, arch, 1).unwrap();
        let b = Model::new(&net, arch, 2).unwrap();
        assert_eq!(a.params.paths(), b.params.paths());
        let mut paths = a.params.paths();
        paths.sort_unstable();
        paths.dedup();
        assert_eq!(paths.len(), a.params.len());
    }
    let direct = Model::new(&net, Variant::CnnPatchtst.architecture(), 1).unwrap();
    assert!(direct.params.paths().iter().all(|p| !p.starts_with("dynamics/")));
    assert!(direct.params.paths().iter().any(|p| p.starts_with("direct_head/")));
    let wm = Model::new(&net, Variant::Wm.architecture(), 1).unwrap();
    assert!(wm.params.paths().iter().any(|p| p.starts_with("dynamics/")));
    assert!(wm.params.iter().any(|p| p.kind == ParamKind::Buffer));
}

#[test]
fn forward_is_deterministic_and_parallel_invariant() {
    let net = tiny_net();
    let cells = tiny_cells(6);
    let windows = windows_of(&cells, &net);
    let refs: Vec<&Window> = windows.iter().collect();
    let model = Model::new(&net, Architecture::WorldModel, 8).unwrap();
    let a = model.predict(&cells, &refs, Parallelism::Sequential).unwrap();
    let b = model.predict(&cells, &refs, Parallelism::Parallel).unwrap();
    assert_eq!(a, b);
    let single = model.forward_window(&cells, &windows[0]).unwrap();
    assert_eq!(single, a[0]);
    let e1 = model.encode_cycle(&cells[0].cycles[0].series).unwrap();
    let e2 = model.encode_cycle(&cells[0].cycles[0].series).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = tiny_net();
    let cells = tiny_cells(2);
    let windows = windows_of(&cells, &net);
    let refs: Vec<&Window> = windows.iter().take(6).collect();
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::WorldModel, Architecture::Direct, Architecture::Lstm] {
        let mut model = Model::new(&net, arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        scramble_dynamics(&mut model, &mut rng);
        model.params.round_to_f32();
        let path = dir.path().join(format!("{arch:?}.bin"));
        model.save(&path).unwrap();
        let back = Model::load(&path, Some(&net)).unwrap();
        assert_eq!(back.architecture(), arch);
        assert_eq!(back.params, model.params);
        let bits = |m: &Model| -> Vec<u64> {
            m.predict(&cells, &refs, Parallelism::Sequential)
                .unwrap()
                .iter()
                .map(|o| o.soh_now.to_bits())
                .collect()
        };
        assert_eq!(bits(&back), bits(&model));
    }
    let model = Model::new(&net, Architecture::WorldModel, 1).unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let mut other = net.clone();
    other.d_model = 12;
    other.ff_width = 24;
    let err = Model::load(&path, Some(&other)).unwrap_err().to_string();
    assert!(err.contains("d_model") && err.contains("ff_width"), "{err}");
    std::fs::write(&path, b"SOHWMTF\0garbage").unwrap();
    assert!(Model::load(&path, None).is_err());
}

/// Cyclic Jacobi eigenvalues of a small symmetric matrix.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

#[test]
fn pca_matches_brute_force_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let n = 40;
        let scales: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..2.0)).collect();
        let latents: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let base: f64 = rng.gen_range(-1.0..1.0);
                scales.iter().map(|s| s * (base + rng.gen_range(-0.5..0.5))).collect()
            })
            .collect();
        let soh = vec![0.9; n];
        let ids = vec!["c".to_string(); n];
        let p = latent_pca(&latents, &soh, &ids).unwrap();

        let mean: Vec<f64> = (0..5).map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![vec![0.0; 5]; 5];
        for z in &latents {
            for i in 0..5 {
                for j in 0..5 {
                    cov[i][j] += (z[i] - mean[i]) * (z[j] - mean[j]) / (n as f64 - 1.0);
                }
            }
        }
        let ev = jacobi_eigenvalues(cov);
        let total: f64 = ev.iter().sum();
        assert_relative_eq!(p.ratios[0], ev[0] / total, epsilon = 1e-9);
        assert_relative_eq!(p.ratios[1], ev[1] / total, epsilon = 1e-9);
        assert!(p.ratios[0] + p.ratios[1] <= 1.0 + 1e-12);
        // Coordinate variance along each component equals its eigenvalue.
        for k in 0..2 {
            let var = p.coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / (n as f64 - 1.0);
            assert_relative_eq!(var, ev[k], epsilon = 1e-9);
        }
    }
}

#[test]
fn pca_is_order_invariant_up_to_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let latents: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let soh = vec![0.9; 20];
    let ids = vec!["c".to_string(); 20];
    let a = latent_pca(&latents, &soh, &ids).unwrap();
    let rev: Vec<Vec<f64>> = latents.iter().rev().cloned().collect();
    let b = latent_pca(&rev, &soh, &ids).unwrap();
    for (i, c) in a.coords.iter().enumerate() {
        let d = b.coords[19 - i];
        for k in 0..2 {
            assert!((c[k].abs() - d[k].abs()).abs() < 1e-9);
        }
    }
}
