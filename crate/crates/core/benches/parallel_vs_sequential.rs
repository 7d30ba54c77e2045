//! Data-parallel kernels on the rayon pool versus a single-thread pool.
//!
//! `cargo bench` compares the default pool with a one-thread pool inside the
//! parallel build. `cargo bench --no-default-features` measures the sequential
//! fallback, where both variants run the same plain loops.

use brainteacher::nn::{build_network, Graph, NetworkSpec, Tensor};
use brainteacher::rsm::{compute_rsm, ResponseMatrix};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let label = if brainteacher::par::is_parallel() { "rayon" } else { "sequential-build" };
    vec![(label, default), ("one-thread", single)]
}

fn random(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_rsm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, d) = (100, 4096);
    let ids: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
    let resp = ResponseMatrix::new(ids, d, (0..m * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let mut group = c.benchmark_group("compute_rsm_100x4096");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| pool.install(|| b.iter(|| compute_rsm(&resp))));
    }
    group.finish();
}

fn bench_network(c: &mut Criterion) {
    let spec = NetworkSpec::cornet_z_mini(20, [3, 32, 32]);
    let net = build_network::<f32>(&spec, 1).unwrap();
    let batch = random(vec![32, 3, 32, 32], 2);
    let labels: Vec<usize> = (0..32).map(|i| i % 20).collect();

    let mut group = c.benchmark_group("forward_batch32");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| net.forward(&batch, &[]).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let mut g = Graph::new();
                    let x = g.leaf(batch.clone());
                    let mut rng = ChaCha8Rng::seed_from_u64(3);
                    let out = net.forward_graph(&mut g, x, &[], false, Some(&mut rng)).unwrap();
                    let loss = g.cross_entropy(out.logits.unwrap(), &labels).unwrap();
                    g.backward(loss).unwrap().for_params(&net.param_shapes())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_rsm, bench_network);
criterion_main!(benches);
