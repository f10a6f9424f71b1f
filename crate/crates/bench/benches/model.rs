use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ssn_core::metrics::ablation::dataset_for;
use ssn_core::rng::{stream, tag};
use ssn_core::{LatentGrid, TrainConfig, TrainState};

fn generator(c: &mut Criterion) {
    for (name, config) in [("toy", TrainConfig::toy()), ("default", TrainConfig::default())] {
        let state = TrainState::new(config.clone()).unwrap();
        let g = &config.generator;
        let mut rng = stream(1, &[tag("bench")]);
        let z = LatentGrid::sample(g.latent_rows, g.latent_cols, g.n_z, &mut rng, 0).to_nchw();
        c.bench_function(&format!("generate/{name}"), |b| b.iter(|| state.generate(black_box(&z)).unwrap()));
    }
}

fn train_step(c: &mut Criterion) {
    let config = TrainConfig::toy();
    let data = dataset_for(&config).unwrap();
    let real = data.batch(0, config.training.batch);
    let mut state = TrainState::new(config).unwrap();
    c.bench_function("train_step/toy", |b| b.iter(|| state.train_step(black_box(&real)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = generator, train_step
}
criterion_main!(benches);
