use concurl_core::dataio::{batch_iterator, BlobSpec};
use concurl_core::ensemble::{consensus_loss, init_ensemble};
use concurl_core::metrics::kmeans;
use concurl_core::rng::{self, Stream, StreamRng};
use concurl_core::softclust::{init_prototypes, sinkhorn_from_scores, SinkhornIters};
use concurl_core::trainer::train_step;
use concurl_core::{EnsembleKind, ModelState, TrainConfig};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(r: usize, c: usize, rng: &mut StreamRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample(StandardNormal))
}

fn sinkhorn(c: &mut Criterion) {
    let mut rng = rng::stream(0, Stream::Data, 0);
    let mut g = c.benchmark_group("sinkhorn");
    for (k, b) in [(10, 128), (100, 256)] {
        let s = randn(k, b, &mut rng).mapv(f64::tanh);
        g.bench_with_input(BenchmarkId::new("fixed3", format!("{k}x{b}")), &s, |bench, s| {
            bench.iter(|| sinkhorn_from_scores(black_box(s), 0.05, SinkhornIters::Fixed(3)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("converge", format!("{k}x{b}")), &s, |bench, s| {
            bench.iter(|| sinkhorn_from_scores(black_box(s), 0.05, SinkhornIters::CONVERGE).unwrap())
        });
    }
    g.finish();
}

fn consensus(c: &mut Criterion) {
    let mut rng = rng::stream(0, Stream::Data, 1);
    let (b, d, k) = (128, 64, 10);
    let protos = init_prototypes(k, d, 0).unwrap();
    let z1 = randn(b, d, &mut rng);
    let z2 = randn(b, d, &mut rng);
    let q = sinkhorn_from_scores(&randn(k, b, &mut rng), 0.5, SinkhornIters::Fixed(3)).unwrap().q_rows;
    let mut g = c.benchmark_group("consensus_loss");
    for m in [1, 4, 16] {
        let ens = init_ensemble(m, EnsembleKind::GaussianProjection, d, 32, 0).unwrap();
        g.bench_function(BenchmarkId::from_parameter(m), |bench| {
            bench.iter(|| consensus_loss(&ens, black_box(&z1), &z2, &protos, &q, &q, 0.1).unwrap())
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let ds = BlobSpec {
        k: 10,
        n_per_cluster: 100,
        dim: 32,
        spread: 0.5,
        separation: 8.0,
        seed: 1,
    }
    .generate()
    .unwrap();
    let cfg = TrainConfig::default();
    let batch = batch_iterator(&ds, cfg.batch_size, &cfg.augment(), 0).unwrap().next().unwrap();
    let state = ModelState::init(&cfg, &ds).unwrap();
    c.bench_function("train_step/default", |bench| {
        bench.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, &batch, cfg.lr).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn kmeans_bench(c: &mut Criterion) {
    let mut rng = rng::stream(0, Stream::Data, 2);
    let x = randn(1000, 128, &mut rng);
    c.bench_function("kmeans/1000x128_k10", |bench| bench.iter(|| kmeans(black_box(&x), 10, 1, 100, 0).unwrap()));
}

criterion_group!(benches, sinkhorn, consensus, training_step, kmeans_bench);
criterion_main!(benches);
