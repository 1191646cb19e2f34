use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tpp_bench::{mixture, random_matrix};
use tpp_core::fisher::fv_encode;
use tpp_core::gmm::{fit_gmm, kmeans};
use tpp_core::tppnet::{backward, forward};
use tpp_core::{MergeMap, NetParams, PoolOp, PyramidSpec};

fn fisher(c: &mut Criterion) {
    let mut g = c.benchmark_group("fv_encode");
    for k in [16, 64, 256] {
        let model = mixture(k, 96, 1);
        let x = random_matrix(200, 96, 2);
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| b.iter(|| fv_encode(&model, black_box(&x)).unwrap()));
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward");
    for pool in [PoolOp::Mean, PoolOp::Max] {
        let params = NetParams::init(256, 128, 10, PyramidSpec::new(5, pool), 3);
        let x = random_matrix(60, 256, 4);
        g.bench_function(format!("{pool:?}"), |b| {
            b.iter(|| {
                let (_, cache) = forward(black_box(&x), &params).unwrap();
                backward(&params, &cache, 2).unwrap()
            })
        });
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let points = random_matrix(2000, 16, 5);
    c.bench_function("kmeans_2000x16_k32", |b| b.iter(|| kmeans(black_box(&points), 32, 6, 20).unwrap()));
    c.bench_function("fit_gmm_2000x16_k8", |b| b.iter(|| fit_gmm(black_box(&points), 8, 7, 20, 1e-6).unwrap()));
}

fn merging(c: &mut Criterion) {
    let map = MergeMap::from_assignments((0..76_800).map(|i| (i * 7919) % 4096).collect(), 4096).unwrap();
    let h = random_matrix(1, 76_800, 8).into_vec();
    c.bench_function("apply_merger_76800_to_4096", |b| b.iter(|| map.apply(black_box(&h)).unwrap()));
}

criterion_group!(benches, fisher, network, clustering, merging);
criterion_main!(benches);
