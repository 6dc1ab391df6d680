//! Sequential versus data-parallel throughput of the per-image workloads.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hcast::analysis::{consistency_table, DEFAULT_TAU};
use hcast::data::{make_synthetic, Image, SynthConfig, SynthDataset};
use hcast::losses::LossConfig;
use hcast::model::{Model, ModelConfig};
use hcast::superpixel::extract_superpixels;
use hcast::trainer::prepare_all;
use hcast::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn dataset() -> SynthDataset {
    make_synthetic(&SynthConfig { samples_per_leaf: 5, ..Default::default() }).unwrap()
}

fn superpixels(c: &mut Criterion) {
    let data = dataset();
    let images: Vec<Image> = data.train.iter().take(32).map(|s| s.image.clone()).collect();
    let mut group = c.benchmark_group("superpixels_32");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(exec.map(&images, |img| extract_superpixels(img.view(), 64).unwrap())))
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let data = dataset();
    let model = Model::new(ModelConfig::default(), &data.tree).unwrap();
    let images: Vec<Image> = data.train.iter().take(32).map(|s| s.image.clone()).collect();
    let mut group = c.benchmark_group("forward_batch_32");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(model.forward_batch(&images, exec)))
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let data = dataset();
    let model = Model::new(ModelConfig::default(), &data.tree).unwrap();
    let batch: Vec<_> = data.train.iter().take(32).collect();
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let inputs = prepare_all(&model, &images, Execution::default()).unwrap();
    let targets: Vec<_> = batch.iter().map(|s| data.tree.encode_tree_path(&s.label_path).unwrap()).collect();
    let loss = LossConfig::default();
    let items: Vec<usize> = (0..batch.len()).collect();
    let mut group = c.benchmark_group("batch_gradients_32");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(exec.map(&items, |&i| {
                    model.loss_and_grad(&inputs[i], &batch[i].label_path, &targets[i], &loss, &data.tree).unwrap()
                }))
            })
        });
    }
    group.finish();
}

fn consistency(c: &mut Criterion) {
    let data = dataset();
    let model = Model::new(ModelConfig::default(), &data.tree).unwrap();
    let samples = &data.test[..12];
    let mut group = c.benchmark_group("consistency_table_12");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(consistency_table(&model, samples, DEFAULT_TAU, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, superpixels, forward, gradients, consistency);
criterion_main!(benches);
