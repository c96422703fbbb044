use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crocodile::data::generate_synthetic;
use crocodile::losses::total_loss;
use crocodile::optim::Adam;
use crocodile::{Batch, Model, RunConfig, SyntheticSpec, Tensor, Variant};

fn train_step(c: &mut Criterion) {
    let spec = SyntheticSpec { domain_sizes: vec![600, 400, 200], seed: 1, ..SyntheticSpec::default() };
    let ds = generate_synthetic(&spec).unwrap();
    let rows: Vec<usize> = (0..512).collect();
    let batch = Batch::from_rows(&ds, &rows);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for variant in [Variant::Mmoe, Variant::MeMmoe, Variant::Sdem, Variant::Crocodile] {
        let run = RunConfig::for_variant(variant).with_seed(0);
        let mut model = Model::new(run.model.clone(), &ds.schema).unwrap();
        let mut adam = Adam::new(run.train.adam, &model.params);
        group.bench_with_input(BenchmarkId::from_parameter(variant.name()), &variant, |bench, _| {
            bench.iter(|| {
                let mut pass = model.forward(&batch, true).unwrap();
                let (loss, _) = total_loss(&mut pass, &batch, &run.train.loss, ds.num_domains(), 0).unwrap();
                let mut grads = pass.tape.backward(loss).unwrap();
                let grads: Vec<Tensor> = pass.vars.iter().map(|&v| grads.take(v).unwrap()).collect();
                adam.update(&mut model.params, &grads).unwrap();
                black_box(adam.step);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
