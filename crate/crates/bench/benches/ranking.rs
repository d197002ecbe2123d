use std::hint::black_box;

use collapse_core::collapse_rank::{
    greedy_oracle_order, neumann_terms_for, pagerank_direct, pagerank_neumann, pagerank_power,
    DependencyGraph,
};
use collapse_core::gaussian_field::GaussianModel;
use collapse_core::order_eval::prefix_entropies;
use collapse_core::seed;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::Rng;

fn random_graph(n: usize) -> DependencyGraph {
    let mut rng = seed::rng_for(n as u64, "bench/graph");
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
    DependencyGraph::from_adjacency(a, 0.85, None).unwrap()
}

fn pagerank(c: &mut Criterion) {
    let mut group = c.benchmark_group("pagerank");
    for n in [16, 64, 256] {
        let graph = random_graph(n);
        let terms = neumann_terms_for(0.85, 1e-10);
        group.bench_with_input(BenchmarkId::new("power", n), &graph, |b, g| {
            b.iter(|| pagerank_power(black_box(g), 1e-12, 10_000).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("neumann", n), &graph, |b, g| {
            b.iter(|| pagerank_neumann(black_box(g), terms))
        });
        group.bench_with_input(BenchmarkId::new("direct", n), &graph, |b, g| {
            b.iter(|| pagerank_direct(black_box(g)).unwrap())
        });
    }
    group.finish();
}

fn entropy(c: &mut Criterion) {
    let mut group = c.benchmark_group("entropy");
    for n in [8, 16, 32] {
        let model = GaussianModel::random(n, 2, 0.3, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("greedy_oracle", n), &model, |b, m| {
            b.iter(|| greedy_oracle_order(black_box(m)).unwrap())
        });
        let order: Vec<usize> = (0..n).collect();
        group.bench_with_input(BenchmarkId::new("prefix_entropies", n), &model, |b, m| {
            b.iter(|| prefix_entropies(black_box(m), &order).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pagerank, entropy);
criterion_main!(benches);
