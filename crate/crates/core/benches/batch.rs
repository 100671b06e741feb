//! Sequential vs parallel cost of one batch of per-example gradients, and of
//! batch evaluation. Build with `--no-default-features` to see the parallel
//! mode fall back to the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpsep::data::{make_dataset, Manifest, MixtureExample, Split};
use dpsep::eval::evaluate;
use dpsep::par::Mode;
use dpsep::tasnet::{ModelConfig, SeparatorModel};
use dpsep::training::batch_gradients;

fn setup() -> (SeparatorModel<f32>, Vec<MixtureExample>) {
    let config = ModelConfig {
        num_filters: 32,
        window: 16,
        num_blocks: 2,
        hidden: 32,
        ..ModelConfig::default()
    };
    let manifest = Manifest::synthetic(Split::Train, 4, Some(0.5), 0);
    let data = make_dataset(&manifest, 0.5, 8000, 0).unwrap();
    (SeparatorModel::new(config, 0).unwrap(), data)
}

fn bench(c: &mut Criterion) {
    let (model, data) = setup();
    let batch: Vec<&MixtureExample> = data.iter().collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for mode in [Mode::Sequential, Mode::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| batch_gradients(&model, &batch, mode, false).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for mode in [Mode::Sequential, Mode::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| evaluate(&model, &data, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
