//! Input generators shared by the benchmarks.

use std::collections::BTreeMap;

use caselink_core::neural::AttentionGraph;
use caselink_core::{CaseDocument, RelevanceLabels, RetrievalRun, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` documents of `len` words drawn from a `vocab`-word vocabulary.
pub fn documents(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<CaseDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
            CaseDocument::new(format!("d{i:05}"), words.join(" "))
        })
        .collect()
}

/// Full rankings of `pool` candidates for `queries` queries, five relevant each.
pub fn run_and_labels(queries: usize, pool: usize, seed: u64) -> (RetrievalRun, RelevanceLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..pool).map(|c| format!("c{c:05}")).collect();
    let mut rankings = BTreeMap::new();
    let mut labels = RelevanceLabels::new();
    for q in 0..queries {
        let q = format!("q{q:04}");
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        for c in order.iter().take(5) {
            labels.insert(q.clone(), c.clone());
        }
        order.shuffle(&mut rng);
        rankings.insert(q, order);
    }
    (RetrievalRun::from_ids(rankings).expect("valid run"), labels)
}

/// Random graph with about `degree` incoming edges per node and features.
pub fn graph(n: usize, degree: usize, dim: usize, seed: u64) -> (AttentionGraph, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(n * degree);
    for v in 0..n {
        for _ in 0..degree {
            let u = rng.gen_range(0..n);
            if u != v {
                edges.push((u, v));
            }
        }
    }
    let x = Tensor::from_vec(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (AttentionGraph::untyped(n, &edges), x)
}
