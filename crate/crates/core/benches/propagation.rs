//! Sequential vs rayon propagation over a few raster sizes.
//!
//! Without the `parallel` feature both arms run the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use depthprompt_core::propagation::reference::propagate_reference;
use depthprompt_core::{
    normalize_affinity, propagate_with, AffinityField, DepthRaster, Execution, PropagationConfig, SparseDepth,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn case(h: usize, w: usize) -> (DepthRaster, SparseDepth, AffinityField) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d0 = DepthRaster::new(h, w, (0..h * w).map(|_| rng.random_range(0.5..10.0)).collect()).unwrap();
    let seeds = d0.retain(|i, _| i % 97 == 0);
    let raw = (0..49 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let field = normalize_affinity(&AffinityField::new(h, w, 7, raw).unwrap()).unwrap();
    (d0, SparseDepth::from_raster(seeds), field)
}

fn propagation(c: &mut Criterion) {
    let cfg = PropagationConfig::default();
    let mut group = c.benchmark_group("propagate");
    for (h, w) in [(64, 64), (128, 160), (256, 320)] {
        let (d0, seeds, field) = case(h, w);
        let label = format!("{h}x{w}");
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, &label), &exec, |b, &exec| {
                b.iter(|| propagate_with(black_box(&d0), &seeds, &field, &cfg, exec).unwrap())
            });
        }
        if h <= 64 {
            group.bench_function(BenchmarkId::new("reference", &label), |b| {
                b.iter(|| propagate_reference(black_box(&d0), &seeds, &field, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, propagation);
criterion_main!(benches);
