use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use uterodiff::conditioning::{ConditionSpec, FieldStrength, OrientationClass, Sequence};
use uterodiff::denoiser::{Denoiser, DenoiserConfig};
use uterodiff::downstream::kmeans;
use uterodiff::metrics::{fid, FeatureSet};
use uterodiff::nn::Tensor;
use uterodiff::preprocess::{generate_phantom, preprocess_chain, ChainConfig, PhantomSpec};
use uterodiff::privacy::{filter_embeddings, EmbeddingIndex, Stage};
use uterodiff::schedule::NoiseSchedule;
use uterodiff_bench::{normal_rows, normal_tensors};

fn schedule(c: &mut Criterion) {
    c.bench_function("schedule/linear_1000", |b| b.iter(|| NoiseSchedule::linear(black_box(1000), 1e-4, 0.02).unwrap()));
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x = normal_tensors(2, &[16, 1, 32, 32], 0);
    c.bench_function("schedule/forward_marginal_16x32x32", |b| b.iter(|| s.forward_marginal(&x[0], black_box(500), &x[1]).unwrap()));
}

fn denoiser(c: &mut Criterion) {
    let den = Denoiser::init(&DenoiserConfig::tiny_2d(32), 0).unwrap();
    let x = Tensor::stack(&normal_tensors(8, &[1, 32, 32], 1));
    let spec = ConditionSpec::new(OrientationClass::RfAv, FieldStrength::T1_5, Sequence::Haste);
    let specs = vec![Some(&spec); 8];
    c.bench_function("denoiser/predict_8x32x32", |b| b.iter(|| den.predict(&x, &[100; 8], &specs).unwrap()));
}

fn preprocess(c: &mut Criterion) {
    let p = generate_phantom(&PhantomSpec::for_class(OrientationClass::AfAv, 3));
    let cfg = ChainConfig::default();
    c.bench_function("preprocess/chain_64_to_32", |b| b.iter(|| preprocess_chain(&p.volume, &p.mask, &cfg).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = FeatureSet::new(1000, 64, normal_rows(1000, 64, 2).concat(), "bench").unwrap();
    let bset = FeatureSet::new(1000, 64, normal_rows(1000, 64, 3).concat(), "bench").unwrap();
    c.bench_function("metrics/fid_1000x64", |b| b.iter(|| fid(&a, &bset).unwrap()));
}

fn privacy(c: &mut Criterion) {
    let train = normal_rows(2000, 64, 4);
    let ids: Vec<String> = (0..train.len()).map(|i| format!("t{i}")).collect();
    let index = EmbeddingIndex::from_embeddings(ids, &train, Stage::Final, "bench".into()).unwrap();
    let samples = normal_rows(200, 64, 5);
    let names: Vec<String> = (0..samples.len()).map(|i| format!("s{i}")).collect();
    c.bench_function("privacy/filter_200_vs_2000", |b| b.iter(|| filter_embeddings(&names, &samples, &index, 0.95).unwrap()));
}

fn clustering(c: &mut Criterion) {
    let pts = normal_rows(500, 64, 6);
    c.bench_function("downstream/kmeans_500x64_k4", |b| {
        b.iter_batched(|| pts.clone(), |p| kmeans(&p, 4, 0).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = schedule, denoiser, preprocess, metrics, privacy, clustering
}
criterion_main!(benches);
