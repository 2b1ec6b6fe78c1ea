//! Convolution and matmul kernels, rayon dispatch vs the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spd_autograd::{conv2d_backward, conv2d_forward, exec, gemm, ConvGeometry};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// First encoder layer at the desk profile: 9 stacked channels, 32 filters.
fn first_layer(batch: usize, size: usize) -> ConvGeometry {
    ConvGeometry { batch, in_channels: 9, height: size, width: size, out_channels: 32, kernel: 3, stride: 2 }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for size in [32, 64] {
        let g = first_layer(32, size);
        let out = (size - g.kernel) / g.stride + 1;
        let x = random(g.batch * g.in_channels * size * size, &mut rng);
        let w = random(g.out_channels * g.in_channels * g.kernel * g.kernel, &mut rng);
        let b = random(g.out_channels, &mut rng);
        let dy = random(g.batch * g.out_channels * out * out, &mut rng);
        let mut group = c.benchmark_group(format!("conv2d_{size}px"));
        for (name, parallel) in MODES {
            group.bench_function(BenchmarkId::new("forward", name), |bench| {
                exec::with_mode(parallel, || bench.iter(|| black_box(conv2d_forward(&x, &w, &b, &g))))
            });
            group.bench_function(BenchmarkId::new("backward", name), |bench| {
                exec::with_mode(parallel, || bench.iter(|| black_box(conv2d_backward(&x, &w, &dy, &g, true))))
            });
        }
        group.finish();
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Batch × flattened conv features → latent, as in the encoder's projection.
    let (m, k, n) = (128, 32 * 35 * 35, 50);
    let a = random(m * k, &mut rng);
    let b = random(k * n, &mut rng);
    let mut out = vec![0.0f32; m * n];
    c.bench_function("gemm_128x39200x50", |bench| {
        bench.iter(|| {
            gemm(false, false, m, n, k, 1.0, &a, &b, 0.0, &mut out);
            black_box(&out);
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, matmul
}
criterion_main!(benches);
