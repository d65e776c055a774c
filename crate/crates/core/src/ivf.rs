//! Inverted-file (IVF-flat) vector index.
//!
//! A k-means coarse quantizer partitions the stored vectors into
//! `ncentroids` inverted lists. A query scans only the lists of its `nprobe`
//! nearest centroids; with `nprobe == ncentroids` the result is identical to
//! [`exact_search`].

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::par;

pub type EntryId = u64;

const KMEANS_MAX_ITERS: usize = 25;
const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Squared Euclidean distance.
    #[default]
    L2,
    /// `1 - dot`, so that smaller is closer.
    InnerProduct,
}

impl Metric {
    #[inline]
    pub fn distance(self, a: &[f32], b: &[f32]) -> f32 {
        match self {
            Metric::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum(),
            Metric::InnerProduct => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::InnerProduct => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Metric::L2),
            1 => Ok(Metric::InnerProduct),
            _ => Err(Error::Shape(format!("unknown metric code {c}"))),
        }
    }
}

/// Up to `k` hits in ascending distance; ties broken by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchResult {
    pub ids: Vec<EntryId>,
    pub distances: Vec<f32>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn cmp_hit(a: &(f32, EntryId), b: &(f32, EntryId)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn top_k(mut hits: Vec<(f32, EntryId)>, k: usize) -> SearchResult {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, cmp_hit);
        hits.truncate(k);
    }
    hits.sort_unstable_by(cmp_hit);
    SearchResult {
        ids: hits.iter().map(|h| h.1).collect(),
        distances: hits.iter().map(|h| h.0).collect(),
    }
}

/// `ncentroids` is the largest power of two not above `sqrt(n)`; `nprobe` is `round(sqrt(ncentroids))`.
pub fn default_index_params(n_entries: usize) -> (usize, usize) {
    let n = n_entries.max(1);
    let root = n.isqrt();
    let ncentroids = (1usize << root.ilog2()).clamp(1, n);
    let nprobe = ((ncentroids as f64).sqrt().round() as usize).clamp(1, ncentroids);
    (ncentroids, nprobe)
}

/// Brute-force scan over `vectors` (row-major, `d` columns).
pub fn exact_search(
    vectors: &[f32],
    ids: &[EntryId],
    d: usize,
    metric: Metric,
    query: &[f32],
    k: usize,
) -> Result<SearchResult> {
    if ids.is_empty() || vectors.len() != ids.len() * d {
        return Err(Error::Empty);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: query.len(),
        });
    }
    let hits = vectors
        .chunks_exact(d)
        .zip(ids)
        .map(|(v, &id)| (metric.distance(query, v), id))
        .collect();
    Ok(top_k(hits, k))
}

/// Fraction of `truth` ids found in `found`.
pub fn recall(found: &SearchResult, truth: &SearchResult) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let got: HashSet<_> = found.ids.iter().collect();
    truth.ids.iter().filter(|id| got.contains(id)).count() as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<EntryId>,
    pub vectors: Vec<f32>,
}

impl InvertedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    d: usize,
    metric: Metric,
    centroids: Vec<f32>,
    lists: Vec<InvertedList>,
    trained: bool,
}

fn check_finite(vectors: &[f32], d: usize) -> Result<()> {
    match vectors.iter().position(|x| !x.is_finite()) {
        Some(p) => Err(Error::NonFinite { index: p / d }),
        None => Ok(()),
    }
}

impl IvfIndex {
    /// An untrained index; call [`IvfIndex::train`] before adding vectors.
    pub fn new(d: usize, metric: Metric) -> Self {
        Self {
            d,
            metric,
            centroids: Vec::new(),
            lists: Vec::new(),
            trained: false,
        }
    }

    /// Train a fresh index on `vectors` with seeded k-means++ / Lloyd iterations.
    pub fn train_new(
        vectors: &[f32],
        d: usize,
        ncentroids: usize,
        metric: Metric,
        seed: u64,
    ) -> Result<Self> {
        let mut index = Self::new(d, metric);
        index.train(vectors, ncentroids, seed)?;
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn ncentroids(&self) -> usize {
        self.lists.len()
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.d..(i + 1) * self.d]
    }

    pub fn lists(&self) -> &[InvertedList] {
        &self.lists
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(InvertedList::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train(&mut self, vectors: &[f32], ncentroids: usize, seed: u64) -> Result<()> {
        let d = self.d;
        if d == 0 || vectors.len() % d != 0 {
            return Err(Error::Shape(format!(
                "training data length {} is not a multiple of d={d}",
                vectors.len()
            )));
        }
        let n = vectors.len() / d;
        if ncentroids == 0 || n < ncentroids {
            return Err(Error::TooFewVectors {
                needed: ncentroids.max(1),
                got: n,
            });
        }
        check_finite(vectors, d)?;
        self.centroids = kmeans(vectors, d, ncentroids, self.metric, seed);
        self.lists = vec![InvertedList::default(); ncentroids];
        self.trained = true;
        Ok(())
    }

    /// Index of the nearest centroid, lowest index on ties.
    pub fn assign(&self, v: &[f32]) -> usize {
        nearest(&self.centroids, self.d, self.metric, v).0
    }

    pub fn add(&mut self, ids: &[EntryId], vectors: &[f32]) -> Result<()> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if vectors.len() != ids.len() * self.d {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * self.d,
                found: vectors.len(),
            });
        }
        check_finite(vectors, self.d)?;
        let mut seen: HashSet<EntryId> = self.lists.iter().flat_map(|l| l.ids.iter().copied()).collect();
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        let d = self.d;
        let assignments = par::map_range(ids.len(), |i| self.assign(&vectors[i * d..(i + 1) * d]));
        for (i, (&id, list)) in ids.iter().zip(assignments).enumerate() {
            let l = &mut self.lists[list];
            l.ids.push(id);
            l.vectors.extend_from_slice(&vectors[i * d..(i + 1) * d]);
        }
        Ok(())
    }

    /// The `nprobe` closest centroids, nearest first.
    pub fn probe_order(&self, query: &[f32], nprobe: usize) -> Vec<usize> {
        let mut cs: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(self.d)
            .enumerate()
            .map(|(i, c)| (self.metric.distance(query, c), i))
            .collect();
        cs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cs.truncate(nprobe);
        cs.into_iter().map(|(_, i)| i).collect()
    }

    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<SearchResult> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if self.is_empty() {
            return Err(Error::Empty);
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if nprobe == 0 || nprobe > self.ncentroids() {
            return Err(Error::InvalidArgument(format!(
                "nprobe {nprobe} outside [1, {}]",
                self.ncentroids()
            )));
        }
        if query.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: query.len(),
            });
        }
        let mut hits = Vec::new();
        for c in self.probe_order(query, nprobe) {
            let list = &self.lists[c];
            hits.extend(
                list.vectors
                    .chunks_exact(self.d)
                    .zip(&list.ids)
                    .map(|(v, &id)| (self.metric.distance(query, v), id)),
            );
        }
        Ok(top_k(hits, k))
    }

    /// Search many queries (row-major); fans out across threads.
    pub fn search_batch(&self, queries: &[f32], k: usize, nprobe: usize) -> Result<Vec<SearchResult>> {
        let n = queries.len() / self.d;
        par::map_range(n, |i| self.search(&queries[i * self.d..(i + 1) * self.d], k, nprobe))
            .into_iter()
            .collect()
    }

    /// Every stored (id, vector) pair, list by list.
    pub fn entries(&self) -> impl Iterator<Item = (EntryId, &[f32])> {
        self.lists
            .iter()
            .flat_map(move |l| l.ids.iter().copied().zip(l.vectors.chunks_exact(self.d)))
    }
}

fn nearest(centroids: &[f32], d: usize, metric: Metric, v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(d).enumerate() {
        let dist = metric.distance(v, c);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

fn sq_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

fn kmeans(vectors: &[f32], d: usize, k: usize, metric: Metric, seed: u64) -> Vec<f32> {
    let n = vectors.len() / d;
    let row = |i: usize| &vectors[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d2: Vec<f64> = par::map_range(n, |i| sq_l2(row(i), row(first)));
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all points coincide with chosen centers
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let new_c = &centroids[c * d..(c + 1) * d];
        let fresh = par::map_range(n, |i| sq_l2(row(i), new_c));
        for (m, f) in min_d2.iter_mut().zip(fresh) {
            if f < *m {
                *m = f;
            }
        }
    }

    for _ in 0..KMEANS_MAX_ITERS {
        let assign = par::map_range(n, |i| nearest(&centroids, d, metric, row(i)));
        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += f64::from(x);
            }
        }
        let mut next = vec![0f32; k * d];
        let mut taken: HashSet<usize> = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                }
            } else {
                // reseed to the point farthest from its assigned centroid
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.insert(far);
                next[c * d..(c + 1) * d].copy_from_slice(row(far));
            }
        }
        let movement = (0..k)
            .map(|c| sq_l2(&centroids[c * d..(c + 1) * d], &next[c * d..(c + 1) * d]))
            .fold(0.0, f64::max);
        centroids = next;
        if movement < KMEANS_TOL {
            break;
        }
    }
    centroids
}

const INDEX_MAGIC: &[u8; 4] = b"RLIV";
const INDEX_VERSION: u32 = 1;

/// Header (magic, version, d_emb, metric, ncentroids, n_entries, checksum), then
/// the trained flag, the centroid block and one block per inverted list.
pub fn encode_index(index: &IvfIndex) -> Vec<u8> {
    let mut body = ByteWriter::new();
    body.u8(u8::from(index.trained));
    body.f32s(&index.centroids);
    for l in &index.lists {
        body.u32(l.len() as u32);
        for &id in &l.ids {
            body.u64(id);
        }
        body.f32s(&l.vectors);
    }
    let mut w = ByteWriter::new();
    w.bytes(INDEX_MAGIC);
    w.u32(INDEX_VERSION);
    w.u32(index.d as u32);
    w.u8(index.metric.code());
    w.u32(index.ncentroids() as u32);
    w.u64(index.len() as u64);
    w.u64(codec::checksum64(&body.buf));
    w.bytes(&body.buf);
    w.buf
}

pub fn decode_index(bytes: &[u8]) -> Result<IvfIndex> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(INDEX_MAGIC, "ivf index")?;
    r.expect_version(INDEX_VERSION, "ivf index")?;
    let d = r.u32()? as usize;
    let metric = Metric::from_code(r.u8()?)?;
    let ncentroids = r.u32()? as usize;
    let n_entries = r.u64()? as usize;
    let checksum = r.u64()?;
    let body = r.take(r.remaining())?;
    if codec::checksum64(body) != checksum {
        return Err(Error::Checksum("ivf index"));
    }
    let mut r = ByteReader::new(body);
    let trained = r.u8()? != 0;
    let centroids = r.f32s(ncentroids * d)?;
    let mut lists = Vec::with_capacity(ncentroids);
    for _ in 0..ncentroids {
        let len = r.u32()? as usize;
        let ids = (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let vectors = r.f32s(len * d)?;
        lists.push(InvertedList { ids, vectors });
    }
    let index = IvfIndex {
        d,
        metric,
        centroids,
        lists,
        trained,
    };
    if index.len() != n_entries {
        return Err(Error::Shape(format!(
            "header claims {n_entries} entries, lists hold {}",
            index.len()
        )));
    }
    Ok(index)
}

pub fn persist_index(index: &IvfIndex, path: &Path) -> Result<()> {
    codec::write_atomic(path, &encode_index(index))
}

pub fn restore_index(path: &Path) -> Result<IvfIndex> {
    decode_index(&codec::read_file(path)?)
}

/// Per-query wall-time statistics, in milliseconds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchTimings {
    pub queries: usize,
    pub avg_ms: f64,
    pub max_ms: f64,
    pub min_ms: f64,
}

impl SearchTimings {
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self {
                queries: 0,
                avg_ms: 0.0,
                max_ms: 0.0,
                min_ms: 0.0,
            };
        }
        Self {
            queries: ms.len(),
            avg_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            max_ms: ms.iter().copied().fold(f64::MIN, f64::max),
            min_ms: ms.iter().copied().fold(f64::MAX, f64::min),
        }
    }
}

/// Issue queries in groups of `concurrency` concurrent searches and time each call.
pub fn profile_search(
    index: &IvfIndex,
    queries: &[f32],
    k: usize,
    nprobe: usize,
    concurrency: usize,
) -> Result<SearchTimings> {
    let d = index.dim();
    let n = queries.len() / d;
    let mut samples = Vec::with_capacity(n);
    for group_start in (0..n).step_by(concurrency.max(1)) {
        let group = (n - group_start).min(concurrency.max(1));
        let timed = par::map_range(group, |j| {
            let q = &queries[(group_start + j) * d..(group_start + j + 1) * d];
            let t = Instant::now();
            let r = index.search(q, k, nprobe);
            (r, t.elapsed().as_secs_f64() * 1e3)
        });
        for (r, ms) in timed {
            r?;
            samples.push(ms);
        }
    }
    Ok(SearchTimings::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_vectors(n: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            out.extend(v.iter().map(|x| x / norm));
        }
        out
    }

    #[test]
    fn default_params_match_reported_sizes() {
        assert_eq!(default_index_params(1_877_559), (1024, 32));
        assert_eq!(default_index_params(45_107_000).0, 4096);
        assert_eq!(default_index_params(1), (1, 1));
        assert_eq!(default_index_params(3_488_000).0, 1024);
    }

    #[test]
    fn kmeans_finds_separated_clouds() {
        let centers = [[10.0f32, 0.0], [-10.0, 0.0], [0.0, 10.0], [0.0, -10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        let mut label = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..50 {
                data.push(c[0] + rng.random_range(-1.0..1.0));
                data.push(c[1] + rng.random_range(-1.0..1.0));
                label.push(ci);
            }
        }
        let index = IvfIndex::train_new(&data, 2, 4, Metric::L2, 11).unwrap();
        // every centroid lies inside exactly one generator's bounding box
        let mut hit = [0usize; 4];
        for c in index.centroids().chunks_exact(2) {
            let owner = centers
                .iter()
                .position(|g| (c[0] - g[0]).abs() <= 1.0 && (c[1] - g[1]).abs() <= 1.0)
                .expect("centroid outside every cloud");
            hit[owner] += 1;
        }
        assert_eq!(hit, [1, 1, 1, 1]);
        // brute-force assignment agrees with generator labels up to relabeling
        let mut map = [usize::MAX; 4];
        for (i, &l) in label.iter().enumerate() {
            let a = index.assign(&data[i * 2..i * 2 + 2]);
            if map[l] == usize::MAX {
                map[l] = a;
            }
            assert_eq!(map[l], a);
        }
    }

    #[test]
    fn single_centroid_is_the_mean() {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 9.0];
        let index = IvfIndex::train_new(&data, 2, 1, Metric::L2, 0).unwrap();
        assert!((index.centroid(0)[0] - 3.0).abs() < 1e-6);
        assert!((index.centroid(0)[1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let data = unit_vectors(500, 8, 1);
        let a = IvfIndex::train_new(&data, 8, 16, Metric::L2, 5).unwrap();
        let b = IvfIndex::train_new(&data, 8, 16, Metric::L2, 5).unwrap();
        let bits = |i: &IvfIndex| i.centroids().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let seq = par::sequential(|| IvfIndex::train_new(&data, 8, 16, Metric::L2, 5).unwrap());
        assert_eq!(bits(&a), bits(&seq));
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            IvfIndex::train_new(&[0.0; 6], 2, 4, Metric::L2, 0),
            Err(Error::TooFewVectors { needed: 4, got: 3 })
        ));
        assert!(matches!(
            IvfIndex::train_new(&[0.0, f32::NAN, 1.0, 1.0], 2, 1, Metric::L2, 0),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn add_lands_in_nearest_list() {
        let data = unit_vectors(200, 4, 2);
        let mut index = IvfIndex::train_new(&data, 4, 8, Metric::L2, 0).unwrap();
        let c3 = index.centroid(3).to_vec();
        index.add(&[4242], &c3).unwrap();
        assert_eq!(index.lists()[3].ids, vec![4242]);
        let ids: Vec<u64> = (0..200).collect();
        index.add(&ids, &data).unwrap();
        assert_eq!(index.len(), 201);
        assert!(matches!(index.add(&[7], &data[..4]), Err(Error::DuplicateId(7))));
        assert!(matches!(
            IvfIndex::new(4, Metric::L2).add(&[0], &data[..4]),
            Err(Error::Untrained)
        ));
    }

    #[test]
    fn three_points_on_a_line() {
        let vectors = [0.0f32, 0.0, 1.0, 0.0, 3.0, 0.0];
        let ids = [10, 11, 12];
        let r = exact_search(&vectors, &ids, 2, Metric::L2, &[3.0, 0.0], 3).unwrap();
        assert_eq!(r.ids, vec![12, 11, 10]);
        assert_eq!(r.distances, vec![0.0, 4.0, 9.0]);
        let r = exact_search(&vectors, &ids, 2, Metric::L2, &[0.0, 0.0], 10).unwrap();
        assert_eq!(r.ids, vec![10, 11, 12]);
        assert!(exact_search(&[], &[], 2, Metric::L2, &[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let vectors = [1.0f32, 0.0, 1.0, 0.0, 1.0, 0.0];
        let r = exact_search(&vectors, &[9, 3, 5], 2, Metric::L2, &[0.0, 0.0], 2).unwrap();
        assert_eq!(r.ids, vec![3, 5]);
    }

    #[test]
    fn single_entry_index() {
        let mut index = IvfIndex::train_new(&[0.6, 0.8], 2, 1, Metric::L2, 0).unwrap();
        index.add(&[5], &[0.6, 0.8]).unwrap();
        let r = index.search(&[1.0, 0.0], 1, 1).unwrap();
        assert_eq!(r.ids, vec![5]);
        let expected = 0.4f32 * 0.4 + 0.8 * 0.8;
        assert!((r.distances[0] - expected).abs() < 1e-6);
        assert!(matches!(index.search(&[1.0, 0.0], 0, 1), Err(Error::InvalidArgument(_))));
        let empty = IvfIndex::train_new(&[0.6, 0.8], 2, 1, Metric::L2, 0).unwrap();
        assert!(matches!(empty.search(&[1.0, 0.0], 1, 1), Err(Error::Empty)));
    }

    #[test]
    fn full_probe_equals_exact_search() {
        for metric in [Metric::L2, Metric::InnerProduct] {
            let data = unit_vectors(2000, 16, 9);
            let ids: Vec<u64> = (0..2000).collect();
            let mut index = IvfIndex::train_new(&data, 16, 32, metric, 1).unwrap();
            index.add(&ids, &data).unwrap();
            let queries = unit_vectors(50, 16, 10);
            for q in queries.chunks_exact(16) {
                let a = index.search(q, 10, 32).unwrap();
                let b = exact_search(&data, &ids, 16, metric, q, 10).unwrap();
                assert_eq!(a, b);
            }
            // stored vector is its own nearest neighbor
            let r = index.search(&data[16 * 7..16 * 8], 1, 32).unwrap();
            assert_eq!(r.ids, vec![7]);
            if metric == Metric::L2 {
                assert_eq!(r.distances[0], 0.0);
            }
        }
    }

    #[test]
    fn lists_partition_the_inserted_set() {
        let data = unit_vectors(300, 8, 4);
        let ids: Vec<u64> = (100..400).collect();
        let mut index = IvfIndex::train_new(&data, 8, 16, Metric::L2, 2).unwrap();
        index.add(&ids, &data).unwrap();
        let mut all: Vec<u64> = index.lists().iter().flat_map(|l| l.ids.clone()).collect();
        assert_eq!(all.len(), 300);
        all.sort_unstable();
        assert_eq!(all, ids);
        for (c, l) in index.lists().iter().enumerate() {
            for v in l.vectors.chunks_exact(8) {
                assert_eq!(index.assign(v), c);
            }
        }
    }

    #[test]
    fn persist_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let data = unit_vectors(400, 8, 6);
        let ids: Vec<u64> = (0..400).collect();
        let mut index = IvfIndex::train_new(&data, 8, 16, Metric::L2, 3).unwrap();

        let empty_path = dir.path().join("empty.ivf");
        persist_index(&index, &empty_path).unwrap();
        let empty = restore_index(&empty_path).unwrap();
        assert_eq!(empty, index);
        assert_eq!(empty.len(), 0);

        index.add(&ids, &data).unwrap();
        let path = dir.path().join("full.ivf");
        persist_index(&index, &path).unwrap();
        let back = restore_index(&path).unwrap();
        for q in unit_vectors(100, 8, 7).chunks_exact(8) {
            assert_eq!(index.search(q, 5, 4).unwrap(), back.search(q, 5, 4).unwrap());
        }

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_index(&bytes), Err(Error::Checksum(_))));

        let mut bytes = encode_index(&index);
        bytes[4] = 9;
        assert!(matches!(decode_index(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn profiling_reports_every_query() {
        let data = unit_vectors(256, 8, 8);
        let ids: Vec<u64> = (0..256).collect();
        let mut index = IvfIndex::train_new(&data, 8, 16, Metric::L2, 3).unwrap();
        index.add(&ids, &data).unwrap();
        let t = profile_search(&index, &data[..8 * 40], 3, 4, 16).unwrap();
        assert_eq!(t.queries, 40);
        assert!(t.min_ms <= t.avg_ms && t.avg_ms <= t.max_ms);
    }
}
