use std::collections::{BTreeMap, BTreeSet};

use geodiff_core::retrieval::{
    average_precision, build_index, evaluate, recall_at_k, top_k, top_k_batch, top_k_blocked, GroundTruth,
};
use geodiff_core::{EmbeddingVector, ItemId, RankedList};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<(ItemId, EmbeddingVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as ItemId)
        .map(|id| {
            let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            (id, EmbeddingVector::new(v).unwrap())
        })
        .collect()
}

fn cosine64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full f64 ranking, best first, ties by ascending id.
fn naive(gallery: &[(ItemId, EmbeddingVector)], q: &EmbeddingVector) -> Vec<(ItemId, f64)> {
    let mut all: Vec<(ItemId, f64)> = gallery.iter().map(|(id, v)| (*id, cosine64(v.values(), q.values()))).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

fn list(ids: &[ItemId]) -> RankedList {
    RankedList { query_id: 0, entries: ids.iter().map(|&id| (id, 0.0)).collect() }
}

#[test]
fn matches_a_naive_scan() {
    let gallery = random_vectors(1000, 64, 1);
    let queries: Vec<_> = random_vectors(100, 64, 2).into_iter().map(|(id, v)| (id + 10_000, v)).collect();
    let index = build_index(gallery.iter().map(|(id, v)| (*id, v))).unwrap();
    let got = top_k_batch(&index, &queries, 10).unwrap();
    for ((_, q), res) in queries.iter().zip(&got) {
        let want = naive(&gallery, q);
        for (rank, &(id, score)) in res.entries.iter().enumerate() {
            // random Gaussian data has no near-ties at this size
            assert_eq!(id, want[rank].0);
            assert!((score as f64 - want[rank].1).abs() < 1e-5);
        }
    }
    assert_eq!(top_k_blocked(&index, &queries, 10, 7).unwrap(), got);
    assert_eq!(top_k(&index, queries[3].0, &queries[3].1, 10).unwrap(), got[3]);
}

#[test]
fn ties_resolve_by_id_whatever_the_insertion_order() {
    let same = EmbeddingVector::new(vec![1.0, 2.0, 0.5]).unwrap();
    let mut items: Vec<(ItemId, EmbeddingVector)> = [40, 7, 19, 3, 25].iter().map(|&id| (id, same.clone())).collect();
    items.push((99, EmbeddingVector::new(vec![-1.0, 0.0, 0.0]).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut first = None;
    for _ in 0..10 {
        items.shuffle(&mut rng);
        let index = build_index(items.iter().map(|(id, v)| (*id, v))).unwrap();
        let r = top_k(&index, 0, &same, 6).unwrap();
        let ids: Vec<ItemId> = r.ids().collect();
        assert_eq!(ids, [3, 7, 19, 25, 40, 99]);
        match &first {
            None => first = Some(r),
            Some(f) => assert_eq!(f, &r),
        }
    }
}

#[test]
fn memory_is_the_matrix_plus_ids() {
    let g = random_vectors(321, 48, 3);
    let index = build_index(g.iter().map(|(id, v)| (*id, v))).unwrap();
    assert_eq!(index.memory_bytes(), 321 * 48 * 4 + 321 * 8);
}

#[test]
fn recall_by_hand_with_ranks_one_and_three() {
    let truth: GroundTruth = BTreeMap::from([(0, BTreeSet::from([10])), (1, BTreeSet::from([20]))]);
    let results = vec![
        RankedList { query_id: 0, entries: list(&[10, 11, 12, 13, 14]).entries },
        RankedList { query_id: 1, entries: list(&[21, 22, 20, 23, 24]).entries },
    ];
    assert_eq!(recall_at_k(&results, &truth, 1).unwrap(), 0.5);
    assert_eq!(recall_at_k(&results, &truth, 5).unwrap(), 1.0);
    let ap = average_precision(&results[1], &truth[&1]).unwrap();
    assert!((ap - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn random_embeddings_give_chance_recall() {
    // each query has one relevant item among n, so R@1 ~ Binomial(q, 1/n) / q
    let n = 50;
    let q = 2000;
    let gallery = random_vectors(n, 16, 7);
    let queries: Vec<_> = random_vectors(q, 16, 8).into_iter().map(|(id, v)| (id + 1000, v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth: GroundTruth =
        queries.iter().map(|(id, _)| (*id, BTreeSet::from([rng.random_range(0..n as ItemId)]))).collect();
    let index = build_index(gallery.iter().map(|(id, v)| (*id, v))).unwrap();
    let report = evaluate(&queries, &index, &truth, &[1, 5]).unwrap();
    let p = 1.0 / n as f64;
    let se = (p * (1.0 - p) / q as f64).sqrt();
    let r1 = report.recall_at[&1];
    assert!((r1 - p).abs() <= 3.0 * se, "R@1 {r1} vs {p} ± {}", 3.0 * se);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recall_is_monotone_and_map_is_a_fraction(seed in any::<u64>(), n in 5usize..40) {
        let gallery = random_vectors(n, 8, seed);
        let queries: Vec<_> = random_vectors(12, 8, seed ^ 1).into_iter().map(|(id, v)| (id + 500, v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: GroundTruth = queries
            .iter()
            .map(|(id, _)| {
                let rel: BTreeSet<ItemId> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..n as ItemId)).collect();
                (*id, rel)
            })
            .collect();
        let index = build_index(gallery.iter().map(|(id, v)| (*id, v))).unwrap();
        let ks: Vec<usize> = (1..=n).collect();
        let report = evaluate(&queries, &index, &truth, &ks).unwrap();
        let values: Vec<f64> = report.recall_at.values().copied().collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(values[n - 1], 1.0);
        prop_assert!((0.0..=1.0).contains(&report.mean_ap));
    }

    #[test]
    fn blocking_never_changes_results(seed in any::<u64>(), block in 1usize..64, k in 1usize..20) {
        let gallery = random_vectors(60, 12, seed);
        let queries = random_vectors(9, 12, seed ^ 3);
        let index = build_index(gallery.iter().map(|(id, v)| (*id, v))).unwrap();
        prop_assert_eq!(top_k_blocked(&index, &queries, k, block).unwrap(), top_k_batch(&index, &queries, k).unwrap());
    }
}

#[test]
fn invalid_k_is_rejected() {
    let g = random_vectors(4, 3, 0);
    let index = build_index(g.iter().map(|(id, v)| (*id, v))).unwrap();
    assert!(top_k(&index, 0, &g[0].1, 0).is_err());
    assert!(top_k(&index, 0, &g[0].1, 5).is_err());
    let short = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
    assert!(top_k(&index, 0, &short, 2).is_err());
}
