//! Criterion benchmarks for the hot kernels: matmul, attention block
//! forward/backward, FIR filtering, and one full training step.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tanet_core::dataio::{synth_trial, SynthConfig};
use tanet_core::layers::softmax_xent;
use tanet_core::model::{backward, forward, init_params, ModelConfig};
use tanet_core::preprocess::{design_bandpass, filter_apply};
use tanet_core::rng::SplitMix64;
use tanet_core::tensor::Tensor;

fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = SplitMix64::new(1);
    let a = rand_tensor(&mut rng, vec![64, 64]);
    let b = rand_tensor(&mut rng, vec![64, 64]);
    c.bench_function("matmul 64x64x64", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig::for_channels(16, 7);
    let params = init_params(&cfg).unwrap();
    let mut rng = SplitMix64::new(2);
    let window = rand_tensor(&mut rng, vec![64, 16]);

    c.bench_function("forward T=64 C=16", |bench| {
        bench.iter(|| forward(black_box(&window), black_box(&params)).unwrap())
    });

    c.bench_function("forward+backward T=64 C=16", |bench| {
        bench.iter(|| {
            let (logits, cache) = forward(black_box(&window), &params).unwrap();
            let row = Tensor::new(vec![1, 2], logits.data().to_vec()).unwrap();
            let (_, dl) = softmax_xent(&row, &[1]).unwrap();
            let d = Tensor::new(vec![2], dl.data().to_vec()).unwrap();
            backward(&d, &cache, &params).unwrap()
        })
    });
}

fn bench_filter(c: &mut Criterion) {
    let synth = SynthConfig {
        subjects: 1,
        trials_per_subject: 1,
        trial_seconds: 4.0,
        channels: 8,
        fs: 512.0,
        snr_db: 6.0,
        seed: 3,
    };
    let rec = synth_trial(&synth, 0, 0).unwrap();
    let filt = design_bandpass(1.0, 50.0, 512.0, 513).unwrap();
    c.bench_function("fir bandpass 8ch x 4s @ 512 Hz", |bench| {
        bench.iter(|| filter_apply(black_box(&rec), black_box(&filt)).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_model, bench_filter);
criterion_main!(benches);
