use std::f64::consts::FRAC_PI_4;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use slab_core::fields::{exact_flow, FlowSpec};
use slab_core::nelson::{estimate_drift, square_grid, DensityEstimate, Direction, NelsonParams};
use slab_core::paths::{simulate, DiffusionSpec, InitialLaw, PathEnsemble, Recording};

fn ensemble(n: usize) -> PathEnsemble {
    let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
    let init = InitialLaw::Gaussian {
        mean: vec![FRAC_PI_4; 2],
        var: vec![0.5; 2],
    };
    let spec = DiffusionSpec::new(flow.velocity, 0.1f64.sqrt(), init, 1.0).unwrap();
    simulate(&spec, n, 1e-2, 7, &Recording::All).unwrap()
}

fn bench_simulate(c: &mut Criterion) {
    c.bench_function("simulate_tg_10k_paths_100_steps", |b| b.iter(|| black_box(ensemble(10_000))));
}

fn bench_drift(c: &mut Criterion) {
    let ens = ensemble(20_000);
    let grid = square_grid([0.0, 0.0], [1.6, 1.6], 5);
    let params = NelsonParams::for_grid(1e-2, 1.0);
    c.bench_function("estimate_backward_drift_20k", |b| {
        b.iter(|| estimate_drift(&ens, 0.5, &grid, &params, Direction::Backward).unwrap())
    });
}

fn bench_kde(c: &mut Criterion) {
    let ens = ensemble(20_000);
    let samples = ens.slice(50).unwrap();
    c.bench_function("binned_kde_20k", |b| {
        b.iter(|| DensityEstimate::from_samples(0.5, samples.clone(), 2, None).unwrap())
    });
}

criterion_group!(benches, bench_simulate, bench_drift, bench_kde);
criterion_main!(benches);
