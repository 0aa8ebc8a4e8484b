//! Full probe forward passes, data-parallel vs sequential.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latentguard_core::probes::{ProbeConfig, ProbeKind, ProbeModel};
use latentguard_core::{par, Fill, Tensor};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("probe_forward");
    g.sample_size(10).measurement_time(Duration::from_secs(10));
    let x = Tensor::<f32>::create([1, 16, 13, 60, 90], Fill::Normal { mean: 0.0, std: 1.0, seed: 9 }).unwrap();
    for kind in [ProbeKind::Vanilla3dcnn, ProbeKind::CnnTransformer] {
        let model = ProbeModel::<f32>::build(ProbeConfig::new(kind), 0).unwrap();
        for (mode, on) in [("parallel", true), ("sequential", false)] {
            par::set_parallel(on);
            g.bench_function(BenchmarkId::new(kind.as_str(), mode), |b| b.iter(|| model.scores(black_box(&x)).unwrap()));
        }
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
