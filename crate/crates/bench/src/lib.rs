//! Synthetic inputs for the retrieval benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rechunk::{ChunkKey, Document};

const VOCAB: &[&str] = &[
    "revenue", "quarter", "growth", "company", "report", "market", "energy", "solar", "wind",
    "battery", "coral", "reef", "glacier", "river", "bridge", "engine", "protein", "enzyme", "tea",
    "leaf", "harbor", "ship", "cargo", "signal", "network", "latency", "model", "token", "chunk",
    "context", "query", "index",
];

/// Documents of `words` space-separated words drawn from a small vocabulary.
pub fn documents(n: usize, words: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text = (0..words)
                .map(|_| *VOCAB.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ");
            Document {
                id: format!("doc-{i:05}"),
                title: String::new(),
                text,
            }
        })
        .collect()
}

/// A short query over the same vocabulary.
pub fn query(terms: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..terms)
        .map(|_| *VOCAB.choose(&mut rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random unit vectors keyed by chunk.
pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<(ChunkKey, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            (
                ChunkKey::new(format!("doc-{:05}", i / 4), i % 4),
                v.iter().map(|x| x / norm).collect(),
            )
        })
        .collect()
}
