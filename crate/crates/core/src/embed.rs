//! Chunk embeddings: a deterministic feature-hashing embedder and a loader for
//! externally computed embedding tables.
//!
//! Vectors are unit-normalized, so similarity is the dot product and distance
//! is `1 - dot`.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f32 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f32 {
        self.dot(self).sqrt()
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    BuiltinHash,
    PrecomputedTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub d_emb: usize,
    pub seed: u64,
}

impl EmbedderSpec {
    pub fn hash(d_emb: usize, seed: u64) -> Self {
        Self {
            kind: EmbedderKind::BuiltinHash,
            d_emb,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self::hash(64, 0)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bucket index and sign for one n-gram feature.
pub fn feature_slot(seed: u64, gram: &[TokenId], d_emb: usize) -> (usize, f64) {
    let mut h = splitmix64(seed ^ (gram.len() as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    for &t in gram {
        h = splitmix64(h ^ u64::from(t));
    }
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    ((h % d_emb as u64) as usize, sign)
}

/// Signed 1-gram + 2-gram feature hashing, L2-normalized. Accepts any non-empty token run.
pub fn embed_tokens(tokens: &[TokenId], spec: &EmbedderSpec) -> Result<EmbeddingVector> {
    spec.validate()?;
    if spec.kind != EmbedderKind::BuiltinHash {
        return Err(Error::Config(
            "precomputed-table embedder cannot embed new text".into(),
        ));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot embed an empty token run".into()));
    }
    let d = spec.d_emb;
    let mut acc = vec![0f64; d];
    for w in tokens.windows(1).chain(tokens.windows(2)) {
        let (slot, sign) = feature_slot(spec.seed, w, d);
        acc[slot] += sign;
    }
    let mut norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every feature cancelled out
        acc[0] = 1.0;
        norm = 1.0;
    }
    Ok(EmbeddingVector(
        acc.iter().map(|x| (x / norm) as f32).collect(),
    ))
}

pub fn embed_chunk(chunk: &[TokenId], chunk_len: usize, spec: &EmbedderSpec) -> Result<EmbeddingVector> {
    if chunk.len() != chunk_len {
        return Err(Error::Shape(format!(
            "chunk has {} tokens, expected {chunk_len}",
            chunk.len()
        )));
    }
    embed_tokens(chunk, spec)
}

/// Embeddings indexed by chunk id (position in the file).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub d_emb: usize,
    pub data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn from_vectors(d_emb: usize, vectors: &[EmbeddingVector]) -> Result<Self> {
        let mut data = Vec::with_capacity(d_emb * vectors.len());
        for v in vectors {
            if v.dim() != d_emb {
                return Err(Error::DimensionMismatch {
                    expected: d_emb,
                    found: v.dim(),
                });
            }
            data.extend_from_slice(&v.0);
        }
        Ok(Self { d_emb, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d_emb
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&[f32]> {
        (id < self.len()).then(|| &self.data[id * self.d_emb..(id + 1) * self.d_emb])
    }
}

const TABLE_MAGIC: &[u8; 4] = b"RLEM";
const TABLE_VERSION: u32 = 1;

pub fn encode_embedding_table(table: &EmbeddingTable) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(TABLE_MAGIC);
    w.u32(TABLE_VERSION);
    w.u32(table.d_emb as u32);
    w.u32(table.len() as u32);
    w.f32s(&table.data);
    w.buf
}

pub fn decode_embedding_table(bytes: &[u8], expected_d: usize) -> Result<EmbeddingTable> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(TABLE_MAGIC, "embedding table")?;
    r.expect_version(TABLE_VERSION, "embedding table")?;
    let d_emb = r.u32()? as usize;
    if d_emb != expected_d {
        return Err(Error::DimensionMismatch {
            expected: expected_d,
            found: d_emb,
        });
    }
    let count = r.u32()? as usize;
    let data = r.f32s(count * d_emb)?;
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            index: pos / d_emb,
        });
    }
    Ok(EmbeddingTable { d_emb, data })
}

pub fn save_embedding_table(path: &Path, table: &EmbeddingTable) -> Result<()> {
    codec::write_atomic(path, &encode_embedding_table(table))
}

pub fn load_embedding_table(path: &Path, expected_d: usize) -> Result<EmbeddingTable> {
    decode_embedding_table(&codec::read_file(path)?, expected_d)
}

/// Anything that maps a chunk to a unit vector.
pub trait ChunkEmbedder: Sync {
    fn d_emb(&self) -> usize;
    fn embed(&self, chunk: &[TokenId]) -> Result<EmbeddingVector>;
}

impl ChunkEmbedder for EmbedderSpec {
    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn embed(&self, chunk: &[TokenId]) -> Result<EmbeddingVector> {
        embed_tokens(chunk, self)
    }
}

/// Precomputed vectors looked up by chunk content.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    table: EmbeddingTable,
    lookup: HashMap<Vec<TokenId>, usize>,
}

impl TableEmbedder {
    /// `chunks[i]` is the chunk whose vector is row `i` of `table`.
    pub fn new(chunks: &[Vec<TokenId>], table: EmbeddingTable) -> Result<Self> {
        if chunks.len() != table.len() {
            return Err(Error::Shape(format!(
                "{} chunks for a table of {} vectors",
                chunks.len(),
                table.len()
            )));
        }
        let lookup = chunks.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(Self { table, lookup })
    }
}

impl ChunkEmbedder for TableEmbedder {
    fn d_emb(&self) -> usize {
        self.table.d_emb
    }

    fn embed(&self, chunk: &[TokenId]) -> Result<EmbeddingVector> {
        let i = self
            .lookup
            .get(chunk)
            .ok_or_else(|| Error::InvalidArgument("chunk missing from the precomputed table".into()))?;
        Ok(EmbeddingVector(self.table.get(*i).expect("index in range").to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn slots(tokens: &[TokenId], spec: &EmbedderSpec) -> Vec<usize> {
        tokens
            .windows(1)
            .chain(tokens.windows(2))
            .map(|g| feature_slot(spec.seed, g, spec.d_emb).0)
            .collect()
    }

    /// First seed whose feature buckets are all distinct across the given runs.
    fn collision_free_seed(runs: &[&[TokenId]], d_emb: usize) -> u64 {
        (0u64..10_000)
            .find(|&seed| {
                let spec = EmbedderSpec::hash(d_emb, seed);
                let mut all: Vec<usize> = runs.iter().flat_map(|r| slots(r, &spec)).collect();
                let n = all.len();
                all.sort_unstable();
                all.dedup();
                all.len() == n
            })
            .expect("no collision-free seed found")
    }

    #[test]
    fn identical_chunks_have_unit_dot() {
        let spec = EmbedderSpec::hash(64, 7);
        let a = embed_chunk(&[1, 2, 3, 4], 4, &spec).unwrap();
        let b = embed_chunk(&[1, 2, 3, 4], 4, &spec).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a.dot(&b), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a.norm(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn disjoint_chunks_are_orthogonal_without_collisions() {
        let a: &[TokenId] = &[1, 2, 3, 4];
        let b: &[TokenId] = &[10, 11, 12, 13];
        let seed = collision_free_seed(&[a, b], 1024);
        let spec = EmbedderSpec::hash(1024, seed);
        let ea = embed_chunk(a, 4, &spec).unwrap();
        let eb = embed_chunk(b, 4, &spec).unwrap();
        assert_eq!(ea.dot(&eb), 0.0);
    }

    #[test]
    fn full_scale_config_accepted() {
        let spec = EmbedderSpec::hash(768, 0);
        let chunk: Vec<TokenId> = (0..64).collect();
        let e = embed_chunk(&chunk, 64, &spec).unwrap();
        assert_eq!(e.dim(), 768);
        assert!(e.0.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn wrong_length_or_empty_rejected() {
        let spec = EmbedderSpec::hash(16, 0);
        assert!(embed_chunk(&[1, 2, 3], 4, &spec).is_err());
        assert!(embed_tokens(&[], &spec).is_err());
        assert!(EmbedderSpec::hash(0, 0).validate().is_err());
    }

    #[test]
    fn cancelled_features_fall_back_to_first_bucket() {
        // find a 2-token run whose three features cancel exactly is unlikely;
        // instead check the fallback on a d=1 embedder where everything collides
        let spec = EmbedderSpec::hash(1, 0);
        let e = embed_tokens(&[5, 6], &spec).unwrap();
        assert_abs_diff_eq!(e.norm(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn more_shared_unigrams_means_higher_similarity() {
        // B shares 3 unigrams with A, C shares 1; no shared bigrams
        let a: &[TokenId] = &[1, 2, 3, 4];
        let b: &[TokenId] = &[3, 1, 20, 2];
        let c: &[TokenId] = &[30, 1, 31, 32];
        let seed = (0u64..10_000)
            .find(|&s| {
                let spec = EmbedderSpec::hash(1024, s);
                let mut distinct: Vec<Vec<TokenId>> = Vec::new();
                for r in [a, b, c] {
                    for g in r.windows(1).chain(r.windows(2)) {
                        if !distinct.contains(&g.to_vec()) {
                            distinct.push(g.to_vec());
                        }
                    }
                }
                let mut buckets: Vec<usize> = distinct
                    .iter()
                    .map(|g| feature_slot(spec.seed, g, 1024).0)
                    .collect();
                let n = buckets.len();
                buckets.sort_unstable();
                buckets.dedup();
                buckets.len() == n
            })
            .unwrap();
        let spec = EmbedderSpec::hash(1024, seed);
        let ea = embed_chunk(a, 4, &spec).unwrap();
        let eb = embed_chunk(b, 4, &spec).unwrap();
        let ec = embed_chunk(c, 4, &spec).unwrap();
        assert!(ea.dot(&eb) > ea.dot(&ec));
        // 7 features each, 3 shared vs 1 shared
        assert_abs_diff_eq!(ea.dot(&eb), 3.0 / 7.0, epsilon = 1e-6);
        assert_abs_diff_eq!(ea.dot(&ec), 1.0 / 7.0, epsilon = 1e-6);
    }

    #[test]
    fn table_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let vectors: Vec<EmbeddingVector> = (0..10)
            .map(|i| EmbeddingVector((0..8).map(|j| (i * 8 + j) as f32 * 0.5 - 3.0).collect()))
            .collect();
        let table = EmbeddingTable::from_vectors(8, &vectors).unwrap();
        save_embedding_table(&path, &table).unwrap();
        let back = load_embedding_table(&path, 8).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(
            back.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            table.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );

        let big = EmbeddingTable {
            d_emb: 768,
            data: vec![0.0; 768],
        };
        let bytes = encode_embedding_table(&big);
        assert!(matches!(
            decode_embedding_table(&bytes, 512),
            Err(Error::DimensionMismatch {
                expected: 512,
                found: 768
            })
        ));

        let mut bad = table.clone();
        bad.data[20] = f32::NAN;
        assert!(matches!(
            decode_embedding_table(&encode_embedding_table(&bad), 8),
            Err(Error::NonFinite { index: 2 })
        ));

        let bytes = encode_embedding_table(&table);
        assert!(matches!(
            decode_embedding_table(&bytes[..bytes.len() - 3], 8),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn table_embedder_looks_up_by_content() {
        let spec = EmbedderSpec::hash(8, 1);
        let chunks = vec![vec![1, 2], vec![3, 4]];
        let vecs: Vec<EmbeddingVector> = chunks.iter().map(|c| embed_tokens(c, &spec).unwrap()).collect();
        let t = TableEmbedder::new(&chunks, EmbeddingTable::from_vectors(8, &vecs).unwrap()).unwrap();
        assert_eq!(t.embed(&[3, 4]).unwrap(), vecs[1]);
        assert!(t.embed(&[9, 9]).is_err());
        assert_eq!(ChunkEmbedder::embed(&spec, &[1, 2]).unwrap(), vecs[0]);
    }
}
