//! Exact and IVF query latency, and batch throughput, on one thread versus the full pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use ver_core::par;
use ver_core::retrieval::{IndexShard, SearchMode};

const DIM: usize = 256;

fn random_index(rows: usize, seed: u64) -> IndexShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..rows / 2).map(|i| format!("E{i:06}")).collect();
    let data = (0..rows)
        .map(|r| {
            (
                (r / 2) as u32,
                (r % 2) as u32,
                (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
        })
        .collect();
    IndexShard::from_rows(ids, data, DIM).expect("valid rows")
}

fn queries(n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn thread_counts() -> Vec<usize> {
    let full = par::current_threads();
    if full > 1 {
        vec![1, full]
    } else {
        vec![1]
    }
}

fn single_query(c: &mut Criterion) {
    let mut index = random_index(50_000, 1);
    index.build_ivf(224, 28, 2).expect("ivf builds");
    let q = queries(1, 3).remove(0);
    let mut g = c.benchmark_group("query_50k_rows");
    g.sample_size(20);
    g.throughput(Throughput::Elements(index.len() as u64));
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::new("exact", t), &t, |b, &t| {
            par::with_threads(t, || {
                b.iter(|| black_box(index.query(&q, 10).expect("query")))
            })
        });
        g.bench_with_input(BenchmarkId::new("ivf", t), &t, |b, &t| {
            par::with_threads(t, || {
                b.iter(|| {
                    black_box(
                        index
                            .search(&q, 10, SearchMode::Ivf { n_probe: 28 })
                            .expect("query"),
                    )
                })
            })
        });
    }
    g.finish();
}

fn query_batch(c: &mut Criterion) {
    let index = random_index(10_000, 4);
    let qs = queries(64, 5);
    let mut g = c.benchmark_group("batch_64_queries_10k_rows");
    g.sample_size(10);
    g.throughput(Throughput::Elements(qs.len() as u64));
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::new("exact", t), &t, |b, &t| {
            par::with_threads(t, || {
                b.iter(|| {
                    black_box(par::map_slice(&qs, |q| {
                        index.query(q, 10).map(|r| r.hits.len())
                    }))
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, single_query, query_batch);
criterion_main!(benches);
