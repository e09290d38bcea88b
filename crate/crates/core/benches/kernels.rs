//! Sequential versus data-parallel execution of the hot kernels.
//!
//! Both variants run in the same binary: `par::with_mode` forces the
//! sequential path for the measured closure. Build without default
//! features to compare against a binary with rayon compiled out entirely.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ibp_core::ibp::{interval_affine, propagate, BnMode, InputBox, IntervalBounds};
use ibp_core::net::{ArchSpec, InitScheme, LayerSpec, Network};
use ibp_core::par::{self, Mode};
use ibp_core::tensor::{conv2d, gemm, sample_gaussian, sample_uniform};
use ibp_core::{SeededRng, Tensor};

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn bench_gemm(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let n = 256;
    let a: Tensor<f32> = sample_gaussian(&mut rng, &[n, n], 0.0, 1.0).unwrap();
    let b: Tensor<f32> = sample_gaussian(&mut rng, &[n, n], 0.0, 1.0).unwrap();
    let mut g = c.benchmark_group("gemm_256");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| par::with_mode(mode, || gemm(black_box(a.data()), b.data(), n, n, n)))
        });
    }
    g.finish();
}

fn bench_interval_affine(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let w: Tensor<f32> = sample_gaussian(&mut rng, &[512, 784], 0.0, 0.05).unwrap();
    let b: Tensor<f32> = Tensor::zeros(&[512]);
    let center: Tensor<f32> = sample_uniform(&mut rng, &[128, 784], 0.0, 1.0).unwrap();
    let bounds = IntervalBounds::new(center.map(|v| v - 0.1), center.map(|v| v + 0.1)).unwrap();
    let mut g = c.benchmark_group("interval_affine_128x784x512");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| par::with_mode(mode, || interval_affine(&w, &b, black_box(&bounds)).unwrap()))
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = SeededRng::new(3);
    let x: Tensor<f32> = sample_uniform(&mut rng, &[64, 8, 14, 14], 0.0, 1.0).unwrap();
    let k: Tensor<f32> = sample_gaussian(&mut rng, &[16, 8, 4, 4], 0.0, 0.1).unwrap();
    let b: Tensor<f32> = Tensor::zeros(&[16]);
    let mut g = c.benchmark_group("conv2d_64x8x14x14_k4s2");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| par::with_mode(mode, || conv2d(black_box(&x), &k, &b, 2, 1).unwrap()))
        });
    }
    g.finish();
}

fn bench_propagate(c: &mut Criterion) {
    let arch = ArchSpec {
        input: vec![1, 28, 28],
        layers: vec![
            LayerSpec::Conv2d { c_in: 1, c_out: 8, kernel: 4, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { c_in: 8, c_out: 16, kernel: 4, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { c_in: 16, c_out: 32, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 512, outputs: 10 },
        ],
        full_bn: true,
    };
    let mut rng = SeededRng::new(4);
    let mut net = Network::<f32>::build(&arch).unwrap();
    net.initialize(InitScheme::Ibp, &mut rng).unwrap();
    let x: Tensor<f32> = sample_uniform(&mut rng, &[128, 1, 28, 28], 0.0, 1.0).unwrap();
    let input = InputBox::unit(0.1);
    let mut g = c.benchmark_group("propagate_small_cnn_128");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| par::with_mode(mode, || propagate(&net, black_box(&x), &input, BnMode::Batch).unwrap()))
        });
    }
    g.finish();
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = bench_gemm, bench_interval_affine, bench_conv, bench_propagate
}
criterion_main!(kernels);
