//! Exact cosine top-K search over an L2-normalized gallery, plus Recall@K and
//! average precision.
//!
//! Similarity is the dot product of normalized rows. Rankings sort by score
//! descending, ties broken by ascending item id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::csv_err;
use crate::error::{Error, Result};

pub type ItemId = u64;

/// Rows scanned per block when several queries share a pass over the gallery.
pub const DEFAULT_BLOCK_ROWS: usize = 4096;
const LANES: usize = 8;
const QUERY_TILE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has a non-finite component".into()));
        }
        Ok(Self { values, normalized: false })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Unit-length copy; zero vectors are rejected.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Input("cannot normalize a zero vector".into()));
        }
        let values = self.values.iter().map(|&v| (v as f64 / n) as f32).collect();
        Ok(Self { values, normalized: true })
    }
}

/// Row-major matrix of unit-norm embeddings with stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<ItemId>,
    matrix: Vec<f32>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Bytes held by the matrix and the id table.
    pub fn memory_bytes(&self) -> usize {
        self.matrix.len() * std::mem::size_of::<f32>() + self.ids.len() * std::mem::size_of::<ItemId>()
    }
}

/// Normalizes and stores the embeddings in input order.
pub fn build_index<'a, I>(items: I) -> Result<GalleryIndex>
where
    I: IntoIterator<Item = (ItemId, &'a EmbeddingVector)>,
{
    let mut ids = Vec::new();
    let mut matrix = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (id, v) in items {
        if *dim.get_or_insert(v.dim()) != v.dim() {
            return Err(Error::Input(format!("item {id} has dim {}, expected {}", v.dim(), dim.unwrap())));
        }
        if !seen.insert(id) {
            return Err(Error::Input(format!("duplicate item id {id}")));
        }
        let unit = v.normalized().map_err(|_| Error::Input(format!("item {id} is a zero vector")))?;
        matrix.extend_from_slice(unit.values());
        ids.push(id);
    }
    let dim = dim.ok_or_else(|| Error::Input("cannot index an empty gallery".into()))?;
    Ok(GalleryIndex { dim, ids, matrix })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: ItemId,
    /// `(item id, cosine similarity)`, best first.
    pub entries: Vec<(ItemId, f32)>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f32,
    id: ItemId,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    /// Greater means worse: lower score, then higher id.
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.id.cmp(&other.id))
    }
}

/// Bounded selection of the `k` best candidates.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, score: f32, id: ItemId) {
        let c = Candidate { score, id };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<(ItemId, f32)> {
        self.heap.into_sorted_vec().into_iter().map(|c| (c.id, c.score)).collect()
    }
}

/// Dot product with a fixed 8-lane accumulation order, so every code path
/// produces bit-identical scores.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[l] += x * y;
    }
    reduce(acc)
}

#[inline]
fn reduce(acc: [f32; LANES]) -> f32 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Four dot products against one row, sharing the row loads.
#[inline]
fn dot4(row: &[f32], q: [&[f32]; QUERY_TILE]) -> [f32; QUERY_TILE] {
    let mut acc = [[0.0f32; LANES]; QUERY_TILE];
    let n = row.len() / LANES * LANES;
    let mut i = 0;
    while i < n {
        let r = &row[i..i + LANES];
        for (a, qv) in acc.iter_mut().zip(&q) {
            let qs = &qv[i..i + LANES];
            for l in 0..LANES {
                a[l] += r[l] * qs[l];
            }
        }
        i += LANES;
    }
    for (l, j) in (n..row.len()).enumerate() {
        for (a, qv) in acc.iter_mut().zip(&q) {
            a[l] += row[j] * qv[j];
        }
    }
    acc.map(reduce)
}

fn prepare_query(index: &GalleryIndex, query: &EmbeddingVector) -> Result<Vec<f32>> {
    if query.dim() != index.dim {
        return Err(Error::Input(format!("query dim {} does not match index dim {}", query.dim(), index.dim)));
    }
    Ok(query.normalized()?.values)
}

/// Exact top-`k` for one query.
pub fn top_k(index: &GalleryIndex, query_id: ItemId, query: &EmbeddingVector, k: usize) -> Result<RankedList> {
    Ok(top_k_batch(index, &[(query_id, query.clone())], k)?.pop().unwrap())
}

/// Exact top-`k` for many queries with the default block size.
pub fn top_k_batch(index: &GalleryIndex, queries: &[(ItemId, EmbeddingVector)], k: usize) -> Result<Vec<RankedList>> {
    top_k_blocked(index, queries, k, DEFAULT_BLOCK_ROWS)
}

/// Blocked scan: the gallery is walked in `block_rows` chunks and each chunk
/// is scored against every query before moving on. Output does not depend on
/// `block_rows`.
pub fn top_k_blocked(
    index: &GalleryIndex,
    queries: &[(ItemId, EmbeddingVector)],
    k: usize,
    block_rows: usize,
) -> Result<Vec<RankedList>> {
    if k == 0 || k > index.len() {
        return Err(Error::Input(format!("k = {k} outside 1..={}", index.len())));
    }
    if block_rows == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let qs: Vec<Vec<f32>> = queries.iter().map(|(_, q)| prepare_query(index, q)).collect::<Result<_>>()?;
    let mut sel: Vec<TopK> = (0..qs.len()).map(|_| TopK::new(k)).collect();
    let dim = index.dim;
    for start in (0..index.len()).step_by(block_rows) {
        let end = (start + block_rows).min(index.len());
        let mut qi = 0;
        while qi + QUERY_TILE <= qs.len() {
            let tile = [&qs[qi][..], &qs[qi + 1][..], &qs[qi + 2][..], &qs[qi + 3][..]];
            for r in start..end {
                let s = dot4(&index.matrix[r * dim..(r + 1) * dim], tile);
                for (j, &score) in s.iter().enumerate() {
                    sel[qi + j].offer(score, index.ids[r]);
                }
            }
            qi += QUERY_TILE;
        }
        for (q, topk) in qs[qi..].iter().zip(&mut sel[qi..]) {
            for r in start..end {
                topk.offer(dot(&index.matrix[r * dim..(r + 1) * dim], q), index.ids[r]);
            }
        }
    }
    Ok(queries
        .iter()
        .zip(sel)
        .map(|((id, _), t)| RankedList { query_id: *id, entries: t.into_sorted() })
        .collect())
}

/// Relevant item ids per query.
pub type GroundTruth = BTreeMap<ItemId, BTreeSet<ItemId>>;

/// Fraction of queries with at least one relevant item among their first `k` entries.
pub fn recall_at_k(results: &[RankedList], truth: &GroundTruth, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Input("no queries to score".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let rel = relevant_for(truth, r.query_id)?;
        if r.entries.iter().take(k).any(|(id, _)| rel.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

fn relevant_for(truth: &GroundTruth, q: ItemId) -> Result<&BTreeSet<ItemId>> {
    match truth.get(&q) {
        Some(s) if !s.is_empty() => Ok(s),
        Some(_) => Err(Error::Input(format!("query {q} has an empty relevant set"))),
        None => Err(Error::Input(format!("query {q} missing from ground truth"))),
    }
}

/// AP from 1-based ranks of the relevant items that were retrieved.
fn ap_from_ranks(mut ranks: Vec<usize>, n_relevant: usize) -> f64 {
    ranks.sort_unstable();
    let sum: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum();
    sum / n_relevant as f64
}

/// Mean of precision@r over the ranks r of the relevant items; `result` must
/// rank the whole gallery.
pub fn average_precision(result: &RankedList, relevant: &BTreeSet<ItemId>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Input("relevant set is empty".into()));
    }
    let ranks = result
        .entries
        .iter()
        .enumerate()
        .filter(|(_, (id, _))| relevant.contains(id))
        .map(|(i, _)| i + 1)
        .collect();
    Ok(ap_from_ranks(ranks, relevant.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub queries: usize,
}

impl MetricsReport {
    /// `metric,value` CSV: one `recall@K` row per K, then `mAP`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.recall_at {
            let _ = writeln!(s, "recall@{k},{v:.6}");
        }
        let _ = writeln!(s, "mAP,{:.6}", self.mean_ap);
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>8}\n", "metric", "value");
        for (k, v) in &self.recall_at {
            let _ = writeln!(s, "{:<10} {:>7.2}%", format!("R@{k}"), v * 100.0);
        }
        let _ = writeln!(s, "{:<10} {:>7.2}%", "AP", self.mean_ap * 100.0);
        let _ = writeln!(s, "({} queries)", self.queries);
        s
    }
}

/// Recall@K for every K in `ks` and mean AP over all queries.
///
/// AP is computed from exact ranks of the relevant items (a full ordering of
/// the gallery is never materialized).
pub fn evaluate(
    queries: &[(ItemId, EmbeddingVector)],
    index: &GalleryIndex,
    truth: &GroundTruth,
    ks: &[usize],
) -> Result<MetricsReport> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(format!("ks must be non-empty and strictly ascending, got {ks:?}")));
    }
    let kmax = ks[ks.len() - 1].min(index.len());
    let lists = top_k_batch(index, queries, kmax)?;
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(&lists, truth, k)?);
    }
    let position: BTreeMap<ItemId, usize> = index.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut ap_sum = 0.0;
    for (qid, q) in queries {
        let rel = relevant_for(truth, *qid)?;
        let qv = prepare_query(index, q)?;
        let rows: Vec<(f32, ItemId)> = rel
            .iter()
            .filter_map(|id| position.get(id).map(|&i| (dot(index.row(i), &qv), *id)))
            .collect();
        let mut ranks = vec![1usize; rows.len()];
        for r in 0..index.len() {
            let s = dot(index.row(r), &qv);
            let id = index.ids[r];
            for (rank, &(rs, rid)) in ranks.iter_mut().zip(&rows) {
                if s > rs || (s == rs && id < rid) {
                    *rank += 1;
                }
            }
        }
        ap_sum += ap_from_ranks(ranks, rel.len());
    }
    Ok(MetricsReport { recall_at, mean_ap: ap_sum / queries.len() as f64, queries: queries.len() })
}

/// Reads `query_id,relevant_id` rows (with header).
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut truth = GroundTruth::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let parse = |i: usize| -> Result<ItemId> {
            row.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad ground-truth row {row:?}")))
        };
        truth.entry(parse(0)?).or_default().insert(parse(1)?);
    }
    Ok(truth)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["query_id", "relevant_id"]).map_err(csv_err)?;
    for (q, rel) in truth {
        for r in rel {
            w.write_record([q.to_string(), r.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
