use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geodiff_bench::random_embeddings;
use geodiff_core::retrieval::{build_index, top_k_batch};

fn top10(c: &mut Criterion) {
    let mut group = c.benchmark_group("top10_100_queries");
    group.sample_size(10);
    for &(n, dim) in &[(10_000usize, 64usize), (160_000, 256)] {
        let gallery = random_embeddings(n, dim, 0, 1).unwrap();
        let queries = random_embeddings(100, dim, 1 << 40, 2).unwrap();
        let index = build_index(gallery.iter().map(|(id, v)| (*id, v))).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{dim}")), &queries, |b, q| {
            b.iter(|| top_k_batch(&index, q, 10).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, top10);
criterion_main!(benches);
