//! Kernel throughput with the rayon path on and off.
//!
//! `cargo bench -p hypercorr --bench kernels`

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hypercorr::conv4d::{conv4d, Conv4dConfig, Kernel4d, Variant};
use hypercorr::correlation::correlation_4d;
use hypercorr::par::set_parallel;
use hypercorr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::uniform(&[16, 13, 13, 13, 13], 0.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("conv4d 16->16 on 13^4");
    group.sample_size(10);
    for variant in Variant::ALL {
        let cfg = Conv4dConfig::new(16, 16, 3, variant).with_support_stride(2);
        let k = Kernel4d::<f32>::init(&cfg, &mut rng).unwrap();
        for (mode, on) in MODES {
            set_parallel(on);
            group.bench_with_input(BenchmarkId::new(variant.name(), mode), &x, |b, x| {
                b.iter(|| conv4d(x, &k, &cfg).unwrap())
            });
        }
    }
    group.finish();
    set_parallel(true);
}

fn correlation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fq = Tensor::<f32>::uniform(&[512, 50, 50], -1.0, 1.0, &mut rng);
    let fs = Tensor::<f32>::uniform(&[512, 50, 50], -1.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("correlation 512x50x50");
    group.sample_size(10);
    for (mode, on) in MODES {
        set_parallel(on);
        group.bench_function(mode, |b| b.iter(|| correlation_4d(&fq, &fs).unwrap()));
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, conv, correlation);
criterion_main!(benches);
