use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use spikewire::convert::{convert, insertion_points, ConvertOptions, ThresholdSpec};
use spikewire::par::Execution;
use spikewire::sim::{run_batch, SimOptions};
use spikewire::toy;

fn batch(c: &mut Criterion) {
    let g = toy::tiny_cnn(1).unwrap();
    let th = insertion_points(&g)
        .into_iter()
        .map(|p| (p.key, ThresholdSpec::manual(1.0)))
        .collect();
    let snn = convert(&g, &th, ConvertOptions::default()).unwrap();
    let data = toy::gaussian_dataset(&g.input_shapes(), 32, 0.0, 1.0, 2).unwrap();
    let opts = SimOptions {
        timesteps: 32,
        ..Default::default()
    };
    let mut group = c.benchmark_group("run_batch");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new(name, data.len()), &exec, |b, &exec| {
            b.iter(|| run_batch(black_box(&snn), black_box(&data), opts, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
