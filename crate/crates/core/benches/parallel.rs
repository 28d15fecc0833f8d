//! Sequential against rayon-parallel execution for the three batch loops
//! that dominate a training run.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsdn::imgproc::ImageTensor;
use tsdn::network::{NetworkConfig, TsdnModel};
use tsdn::par::Exec;
use tsdn::surf::{surf_batch, SurfConfig};
use tsdn::training::{TrainConfig, Trainer};

const BATCH: usize = 8;

fn images(n: usize, size: usize) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| ImageTensor::new(3, size, size, (0..3 * size * size).map(|_| rng.random()).collect()).unwrap())
        .collect()
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench(c: &mut Criterion) {
    let net = NetworkConfig::default();
    let imgs = images(BATCH, 64);
    let model = TsdnModel::<f32>::new(&net, 0).unwrap();
    let surf = SurfConfig {
        n_segments: 40,
        fill_count: 5,
        seed: 0,
    };

    let mut group = c.benchmark_group("batch8");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::new("forward", name), &exec, |b, &exec| {
            b.iter(|| black_box(model.forward_batch(&imgs, exec).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("surf", name), &exec, |b, &exec| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| black_box(surf_batch(&imgs, &surf, &mut rng, exec).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("train_step", name), &exec, |b, &exec| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let samples = surf_batch(&imgs, &surf, &mut rng, exec).unwrap();
            let mut trainer = Trainer::new(model.clone(), &TrainConfig::default(), exec).unwrap();
            let mut step = 0;
            b.iter(|| {
                step += 1;
                black_box(trainer.step(&samples, 0, step).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
