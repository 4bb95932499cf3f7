use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sohwm::data::{build_all_windows, Window};
use sohwm::loss::{window_objective, LossFlags, LossWeights};
use sohwm::net::{Architecture, Model, NetConfig};
use sohwm::synth::{generate_fleet, FleetRanges};
use sohwm::Parallelism;

fn setup() -> (NetConfig, Vec<sohwm::data::CellRecord>, Vec<Window>) {
    let net = NetConfig {
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
        lstm_hidden: 16,
        ..NetConfig::default()
    };
    let ranges = FleetRanges {
        lifetime: (150, 200),
        samples_per_cycle: 60,
        t_max: 64,
        ..FleetRanges::default()
    };
    let cells = generate_fleet(4, &ranges, 1).expect("fleet");
    let idx: Vec<usize> = (0..cells.len()).collect();
    let windows = build_all_windows(&cells, &idx, net.window, net.horizon);
    (net, cells, windows)
}

fn modes() -> [(&'static str, Parallelism); 2] {
    [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)]
}

fn bench(c: &mut Criterion) {
    let (net, cells, windows) = setup();
    let model = Model::new(&net, Architecture::WorldModel, 0).expect("model");
    // A training-sized batch spread across the fleet.
    let batch: Vec<&Window> = windows.iter().step_by(windows.len() / 32).take(32).collect();
    let all: Vec<&Window> = windows.iter().take(256).collect();
    let weights = LossWeights::default();
    let flags = LossFlags { physics: true, ewc: false };

    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| {
                model
                    .batch_gradients(&cells, &batch, par, &|w, o| window_objective(w, o, &weights, flags))
                    .expect("gradients")
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("predict");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| model.predict(&cells, &all, par).expect("predict"))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
