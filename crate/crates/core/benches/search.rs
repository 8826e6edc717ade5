use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use leanrag_core::retrieval::{
    embed_texts, ChunkRef, HashingEmbedder, Metric, RetrievalMode, VectorIndex,
};
use leanrag_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 768;

fn random_index(rows: usize, rng: &mut ChaCha8Rng) -> VectorIndex {
    let mut index = VectorIndex::new(DIM, Metric::L2, RetrievalMode::Summaries);
    for i in 0..rows {
        let v: Vec<f32> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        index.push(ChunkRef::new(format!("doc{i}"), 0), &v).unwrap();
    }
    index
}

fn strategies() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel { width: None }),
    ]
}

fn batch_top_k(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // roughly the size of a summarised condition corpus
    let index = random_index(1000, &mut rng);
    let queries: Vec<Vec<f32>> = (0..256)
        .map(|_| (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut group = c.benchmark_group("batch_top_k");
    group.throughput(Throughput::Elements(queries.len() as u64));
    for k in [5, 100] {
        for (name, execution) in strategies() {
            group.bench_with_input(BenchmarkId::new(name, k), &k, |b, &k| {
                b.iter(|| index.query_batch(black_box(&queries), k, execution).unwrap())
            });
        }
    }
    group.finish();
}

fn hashing_embed(c: &mut Criterion) {
    let embedder = HashingEmbedder::new(DIM);
    let texts: Vec<String> = (0..512)
        .map(|i| format!("patient {i} reports a sore throat, fever and aching muscles for three days"))
        .collect();
    let mut group = c.benchmark_group("embed_texts");
    group.throughput(Throughput::Elements(texts.len() as u64));
    for (name, execution) in strategies() {
        group.bench_function(name, |b| {
            b.iter(|| embed_texts(&embedder, black_box(&texts), 64, execution).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_top_k, hashing_embed);
criterion_main!(benches);
