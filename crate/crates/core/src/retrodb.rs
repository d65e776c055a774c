//! Key/value chunk database, neighbor retrieval with continuation filtering,
//! the precomputed neighbor store, and leakage analytics.
//!
//! Every entry keys on one chunk `N` of a document and carries the chunk
//! that follows it as the value `C`. Positions are tracked in stream
//! coordinates (offset of the chunk in the joined corpus stream), which is
//! also how training samples are addressed, so the continuation filter can
//! compare spans directly.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::corpus::{Corpus, SequenceSample, TokenId, TokenSequence};
use crate::embed::{ChunkEmbedder, EmbedderKind, EmbedderSpec, EmbeddingTable};
use crate::error::{Error, Result};
use crate::ivf::{default_index_params, EntryId, IvfIndex, Metric};
use crate::model::NeighborTokens;
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbEntry {
    pub id: EntryId,
    pub key_tokens: Vec<TokenId>,
    /// Always `chunk_len` long; positions past `value_len` are padding.
    pub value_tokens: Vec<TokenId>,
    pub value_len: usize,
    pub doc_id: u32,
    /// Offset of the key inside its document.
    pub offset: usize,
    /// Offset of the key in the joined corpus stream.
    pub stream_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDb {
    pub chunk_len: usize,
    pub vocab_size: u32,
    pub embedder: EmbedderSpec,
    pub entries: Vec<DbEntry>,
    pub embeddings: EmbeddingTable,
}

impl RetrievalDb {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: EntryId) -> Option<&DbEntry> {
        self.entries.get(id as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub entries: usize,
    pub tokens: usize,
    pub skipped_docs: Vec<u32>,
    pub ncentroids: usize,
    pub nprobe: usize,
}

/// Documents of a corpus, each tagged with its id and stream start offset.
pub fn corpus_documents(corpus: &Corpus) -> Vec<TokenSequence> {
    corpus
        .docs
        .iter()
        .zip(corpus.doc_starts())
        .enumerate()
        .map(|(i, (d, start))| TokenSequence::with_origin(d.clone(), i as u32, start))
        .collect()
}

/// One entry per non-overlapping chunk of every document, indexed with default IVF parameters.
pub fn build_db(
    docs: &[TokenSequence],
    chunk_len: usize,
    vocab_size: u32,
    embedder: &dyn ChunkEmbedder,
    spec: EmbedderSpec,
    seed: u64,
) -> Result<(RetrievalDb, IvfIndex, BuildReport)> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    if embedder.d_emb() != spec.d_emb {
        return Err(Error::DimensionMismatch {
            expected: spec.d_emb,
            found: embedder.d_emb(),
        });
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut tokens = 0;
    for doc in docs {
        doc.validate(vocab_size)?;
        if doc.len() < chunk_len {
            log::warn!("document {} has {} tokens, fewer than one chunk; skipped", doc.doc_id, doc.len());
            skipped.push(doc.doc_id);
            continue;
        }
        tokens += doc.len();
        for i in 0..doc.len() / chunk_len {
            let s = i * chunk_len;
            let key_tokens = doc.tokens[s..s + chunk_len].to_vec();
            let vend = (s + 2 * chunk_len).min(doc.len());
            let mut value_tokens = doc.tokens[s + chunk_len..vend].to_vec();
            let value_len = value_tokens.len();
            value_tokens.resize(chunk_len, 0);
            entries.push(DbEntry {
                id: entries.len() as EntryId,
                key_tokens,
                value_tokens,
                value_len,
                doc_id: doc.doc_id,
                offset: s,
                stream_offset: doc.offset + s,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::CorpusTooSmall(format!(
            "no document has at least chunk_len={chunk_len} tokens"
        )));
    }
    let vectors = par::map_range(entries.len(), |i| embedder.embed(&entries[i].key_tokens))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let embeddings = EmbeddingTable::from_vectors(spec.d_emb, &vectors)?;
    let (ncentroids, nprobe) = default_index_params(entries.len());
    let mut index = IvfIndex::train_new(&embeddings.data, spec.d_emb, ncentroids, Metric::L2, seed)?;
    let ids: Vec<EntryId> = entries.iter().map(|e| e.id).collect();
    index.add(&ids, &embeddings.data)?;
    let report = BuildReport {
        entries: entries.len(),
        tokens,
        skipped_docs: skipped,
        ncentroids,
        nprobe,
    };
    Ok((
        RetrievalDb {
            chunk_len,
            vocab_size,
            embedder: spec,
            entries,
            embeddings,
        },
        index,
        report,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRecord {
    /// `[N, C]`, length `2·chunk_len`.
    pub tokens: Vec<TokenId>,
    pub valid: Vec<bool>,
    pub distance: f32,
    /// `None` for the all-padding record of a row with no survivors.
    pub source: Option<EntryId>,
}

impl NeighborRecord {
    fn from_entry(e: &DbEntry, distance: f32) -> Self {
        let l = e.key_tokens.len();
        let mut tokens = e.key_tokens.clone();
        tokens.extend_from_slice(&e.value_tokens);
        let mut valid = vec![true; l];
        valid.extend((0..l).map(|i| i < e.value_len));
        Self {
            tokens,
            valid,
            distance,
            source: Some(e.id),
        }
    }

    fn empty(chunk_len: usize) -> Self {
        Self {
            tokens: vec![0; 2 * chunk_len],
            valid: vec![false; 2 * chunk_len],
            distance: f32::INFINITY,
            source: None,
        }
    }

    /// Tokens not covered by padding.
    pub fn valid_tokens(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .zip(&self.valid)
            .filter_map(|(&t, &v)| v.then_some(t))
            .collect()
    }
}

/// `n_chunks × k` records for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub n_chunks: usize,
    pub k: usize,
    pub chunk_len: usize,
    pub records: Vec<NeighborRecord>,
    /// Per chunk: the row was filled by repeating its last survivor (or is empty).
    pub repeated: Vec<bool>,
}

impl NeighborSet {
    pub fn get(&self, chunk: usize, rank: usize) -> &NeighborRecord {
        &self.records[chunk * self.k + rank]
    }

    pub fn to_tokens(&self) -> NeighborTokens {
        let mut tokens = Vec::with_capacity(self.records.len() * 2 * self.chunk_len);
        let mut valid = Vec::with_capacity(tokens.capacity());
        for r in &self.records {
            tokens.extend_from_slice(&r.tokens);
            valid.extend_from_slice(&r.valid);
        }
        NeighborTokens::new(self.n_chunks, self.k, 2 * self.chunk_len, tokens, valid).expect("rectangular set")
    }

    pub fn distances(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.distance).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalParams {
    pub k: usize,
    pub nprobe: usize,
    pub filter_continuations: bool,
}

/// True when the key span of `e` lies within one chunk of `[q, q + chunk_len)`.
fn is_continuation(e: &DbEntry, q: usize, chunk_len: usize) -> bool {
    // key span [e, e+L) intersects [q-L, q+2L)
    e.stream_offset + 2 * chunk_len > q && e.stream_offset < q + 2 * chunk_len
}

/// Retrieves `k` neighbors for every chunk of `seq`; `seq.offset` is its stream offset.
pub fn get_neighbors(
    db: &RetrievalDb,
    index: &IvfIndex,
    embedder: &dyn ChunkEmbedder,
    seq: &TokenSequence,
    params: RetrievalParams,
) -> Result<NeighborSet> {
    let l = db.chunk_len;
    if db.is_empty() || index.is_empty() {
        return Err(Error::Empty);
    }
    if params.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if seq.len() % l != 0 {
        return Err(Error::NotChunkAligned {
            len: seq.len(),
            chunk_len: l,
        });
    }
    let n_chunks = seq.len() / l;
    let want = (4 * params.k).min(index.len()).max(params.k.min(index.len()));
    let nprobe = params.nprobe.clamp(1, index.ncentroids());
    let mut records = Vec::with_capacity(n_chunks * params.k);
    let mut repeated = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let chunk = &seq.tokens[c * l..(c + 1) * l];
        let q = embedder.embed(chunk)?;
        let hits = index.search(q.as_slice(), want, nprobe)?;
        let q_off = seq.offset + c * l;
        let mut row: Vec<NeighborRecord> = hits
            .ids
            .iter()
            .zip(&hits.distances)
            .filter_map(|(&id, &dist)| {
                let e = db.entry(id)?;
                (!params.filter_continuations || !is_continuation(e, q_off, l)).then(|| NeighborRecord::from_entry(e, dist))
            })
            .take(params.k)
            .collect();
        let short = row.len() < params.k;
        if short {
            let fill = row.last().cloned().unwrap_or_else(|| NeighborRecord::empty(l));
            row.resize(params.k, fill);
        }
        repeated.push(short);
        records.extend(row);
    }
    Ok(NeighborSet {
        n_chunks,
        k: params.k,
        chunk_len: l,
        records,
        repeated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    /// Stream offset of `src[0]`.
    pub offset: u64,
    pub neighbors: NeighborSet,
}

/// Training-loop input: samples with their precomputed neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborStore {
    pub seq_len: usize,
    pub chunk_len: usize,
    pub k: usize,
    pub vocab_size: u32,
    pub records: Vec<StoreRecord>,
}

impl NeighborStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn precompute_neighbors(
    db: &RetrievalDb,
    index: &IvfIndex,
    embedder: &dyn ChunkEmbedder,
    samples: &[SequenceSample],
    params: RetrievalParams,
) -> Result<NeighborStore> {
    let Some(first) = samples.first() else {
        return Err(Error::Empty);
    };
    let seq_len = first.src.len();
    if seq_len % db.chunk_len != 0 {
        return Err(Error::NotChunkAligned {
            len: seq_len,
            chunk_len: db.chunk_len,
        });
    }
    let records = par::map_range(samples.len(), |i| {
        let s = &samples[i];
        if s.src.len() != seq_len || s.tgt.len() != seq_len {
            return Err(Error::Shape(format!("sample {i} length differs from {seq_len}")));
        }
        Ok(StoreRecord {
            src: s.src.tokens.clone(),
            tgt: s.tgt.tokens.clone(),
            offset: s.src.offset as u64,
            neighbors: get_neighbors(db, index, embedder, &s.src, params)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(NeighborStore {
        seq_len,
        chunk_len: db.chunk_len,
        k: params.k,
        vocab_size: db.vocab_size,
        records,
    })
}

const STORE_MAGIC: &[u8; 4] = b"RLNS";
const STORE_VERSION: u32 = 1;
const DB_MAGIC: &[u8; 4] = b"RLDB";
const DB_VERSION: u32 = 1;
const NO_SOURCE: u64 = u64::MAX;

fn finish_with_checksum(mut w: ByteWriter) -> Vec<u8> {
    let sum = codec::checksum64(&w.buf);
    w.u64(sum);
    w.buf
}

fn verify_checksum<'a>(bytes: &'a [u8], what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            found: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if codec::checksum64(body) != stored {
        return Err(Error::Checksum(what));
    }
    Ok(body)
}

fn bools_to_bytes(w: &mut ByteWriter, v: &[bool]) {
    for &b in v {
        w.u8(u8::from(b));
    }
}

fn bytes_to_bools(r: &mut ByteReader, n: usize) -> Result<Vec<bool>> {
    Ok(r.take(n)?.iter().map(|&b| b != 0).collect())
}

/// Header (magic, version, seq_len, chunk_len, k, n_records, vocab_size), records, checksum.
pub fn encode_store(store: &NeighborStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u32(store.seq_len as u32);
    w.u32(store.chunk_len as u32);
    w.u32(store.k as u32);
    w.u64(store.records.len() as u64);
    w.u32(store.vocab_size);
    for r in &store.records {
        w.u64(r.offset);
        w.u32s(&r.src);
        w.u32s(&r.tgt);
        for rec in &r.neighbors.records {
            w.u32s(&rec.tokens);
            bools_to_bytes(&mut w, &rec.valid);
        }
        for rec in &r.neighbors.records {
            w.f32(rec.distance);
            w.u64(rec.source.unwrap_or(NO_SOURCE));
        }
        bools_to_bytes(&mut w, &r.neighbors.repeated);
    }
    finish_with_checksum(w)
}

pub fn decode_store(bytes: &[u8]) -> Result<NeighborStore> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(STORE_MAGIC, "neighbor store")?;
    r.expect_version(STORE_VERSION, "neighbor store")?;
    let body = verify_checksum(bytes, "neighbor store")?;
    let mut r = ByteReader::new(&body[8..]);
    let seq_len = r.u32()? as usize;
    let chunk_len = r.u32()? as usize;
    let k = r.u32()? as usize;
    let n = r.u64()? as usize;
    let vocab_size = r.u32()?;
    if chunk_len == 0 || seq_len % chunk_len != 0 || k == 0 {
        return Err(Error::Shape(format!("bad store header seq_len={seq_len} chunk_len={chunk_len} k={k}")));
    }
    let n_chunks = seq_len / chunk_len;
    let w = 2 * chunk_len;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let offset = r.u64()?;
        let src = r.u32s(seq_len)?;
        let tgt = r.u32s(seq_len)?;
        let mut recs = Vec::with_capacity(n_chunks * k);
        for _ in 0..n_chunks * k {
            let tokens = r.u32s(w)?;
            let valid = bytes_to_bools(&mut r, w)?;
            recs.push(NeighborRecord {
                tokens,
                valid,
                distance: 0.0,
                source: None,
            });
        }
        for rec in &mut recs {
            rec.distance = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            let s = r.u64()?;
            rec.source = (s != NO_SOURCE).then_some(s);
        }
        let repeated = bytes_to_bools(&mut r, n_chunks)?;
        records.push(StoreRecord {
            src,
            tgt,
            offset,
            neighbors: NeighborSet {
                n_chunks,
                k,
                chunk_len,
                records: recs,
                repeated,
            },
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Shape(format!("{} trailing bytes in neighbor store", r.remaining())));
    }
    Ok(NeighborStore {
        seq_len,
        chunk_len,
        k,
        vocab_size,
        records,
    })
}

pub fn save_store(path: &Path, store: &NeighborStore) -> Result<()> {
    codec::write_atomic(path, &encode_store(store))
}

pub fn load_store(path: &Path) -> Result<NeighborStore> {
    decode_store(&codec::read_file(path)?)
}

pub fn encode_db(db: &RetrievalDb) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DB_MAGIC);
    w.u32(DB_VERSION);
    w.u32(db.chunk_len as u32);
    w.u32(db.vocab_size);
    w.u8(match db.embedder.kind {
        EmbedderKind::BuiltinHash => 0,
        EmbedderKind::PrecomputedTable => 1,
    });
    w.u32(db.embedder.d_emb as u32);
    w.u64(db.embedder.seed);
    w.u64(db.entries.len() as u64);
    for e in &db.entries {
        w.u32(e.doc_id);
        w.u64(e.offset as u64);
        w.u64(e.stream_offset as u64);
        w.u32(e.value_len as u32);
        w.u32s(&e.key_tokens);
        w.u32s(&e.value_tokens);
    }
    w.f32s(&db.embeddings.data);
    finish_with_checksum(w)
}

pub fn decode_db(bytes: &[u8]) -> Result<RetrievalDb> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DB_MAGIC, "retrieval db")?;
    r.expect_version(DB_VERSION, "retrieval db")?;
    let body = verify_checksum(bytes, "retrieval db")?;
    let mut r = ByteReader::new(&body[8..]);
    let chunk_len = r.u32()? as usize;
    let vocab_size = r.u32()?;
    let kind = match r.u8()? {
        0 => EmbedderKind::BuiltinHash,
        1 => EmbedderKind::PrecomputedTable,
        k => return Err(Error::Config(format!("unknown embedder kind {k}"))),
    };
    let d_emb = r.u32()? as usize;
    let seed = r.u64()?;
    let n = r.u64()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 24));
    for id in 0..n {
        let doc_id = r.u32()?;
        let offset = r.u64()? as usize;
        let stream_offset = r.u64()? as usize;
        let value_len = r.u32()? as usize;
        entries.push(DbEntry {
            id: id as EntryId,
            key_tokens: r.u32s(chunk_len)?,
            value_tokens: r.u32s(chunk_len)?,
            value_len,
            doc_id,
            offset,
            stream_offset,
        });
    }
    let data = r.f32s(n * d_emb)?;
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: i / d_emb.max(1) });
    }
    Ok(RetrievalDb {
        chunk_len,
        vocab_size,
        embedder: EmbedderSpec { kind, d_emb, seed },
        entries,
        embeddings: EmbeddingTable { d_emb, data },
    })
}

pub fn save_db(path: &Path, db: &RetrievalDb) -> Result<()> {
    codec::write_atomic(path, &encode_db(db))
}

pub fn load_db(path: &Path) -> Result<RetrievalDb> {
    decode_db(&codec::read_file(path)?)
}

/// `|A ∩ B| / |A ∪ B|` over token sets; two empty sequences give 1.
pub fn jaccard_1gram(a: &[TokenId], b: &[TokenId]) -> f64 {
    let (inter, union) = jaccard_counts(a, b);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn jaccard_counts(a: &[TokenId], b: &[TokenId]) -> (usize, usize) {
    let sa: HashSet<TokenId> = a.iter().copied().collect();
    let sb: HashSet<TokenId> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    (inter, sa.len() + sb.len() - inter)
}

/// True iff some run of `t` consecutive tokens occurs in both sequences.
pub fn contiguous_overlap(a: &[TokenId], b: &[TokenId], t: usize) -> bool {
    assert!(t >= 1, "run length must be at least 1");
    if a.len() < t || b.len() < t {
        return false;
    }
    let grams: HashSet<&[TokenId]> = b.windows(t).collect();
    a.windows(t).any(|w| grams.contains(w))
}

pub const JACCARD_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Offender {
    pub sequence: usize,
    pub chunk: usize,
    pub rank: usize,
    pub jaccard: f64,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageReport {
    pub t: usize,
    pub sequences: usize,
    pub neighbors: usize,
    pub overlapping: usize,
    pub fraction: f64,
    pub mean_jaccard: f64,
    /// Bin `i` counts Jaccard values in `[0.05·i, 0.05·(i+1))`; 1.0 lands in the last bin.
    pub jaccard_hist: Vec<usize>,
    /// The highest-Jaccard neighbor of each sequence, in sequence order.
    pub worst: Vec<Offender>,
}

/// Compares every sequence with each of its retrieved neighbors (valid tokens only).
pub fn leakage_report(samples: &[&[TokenId]], sets: &[NeighborSet], t: usize) -> Result<LeakageReport> {
    if samples.len() != sets.len() {
        return Err(Error::Shape(format!("{} samples but {} neighbor sets", samples.len(), sets.len())));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    let mut hist = vec![0usize; JACCARD_BINS];
    let mut neighbors = 0;
    let mut overlapping = 0;
    let mut jsum = 0.0;
    let mut worst = Vec::new();
    for (si, (seq, set)) in samples.iter().zip(sets).enumerate() {
        let mut best: Option<Offender> = None;
        for c in 0..set.n_chunks {
            for rank in 0..set.k {
                let rec = set.get(c, rank);
                if rec.source.is_none() {
                    continue;
                }
                let toks = rec.valid_tokens();
                let (inter, union) = jaccard_counts(seq, &toks);
                let j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                let bin = if union == 0 { JACCARD_BINS - 1 } else { (inter * JACCARD_BINS / union).min(JACCARD_BINS - 1) };
                hist[bin] += 1;
                let overlap = contiguous_overlap(seq, &toks, t);
                neighbors += 1;
                overlapping += usize::from(overlap);
                jsum += j;
                if best.as_ref().is_none_or(|b| j > b.jaccard) {
                    best = Some(Offender {
                        sequence: si,
                        chunk: c,
                        rank,
                        jaccard: j,
                        overlap,
                    });
                }
            }
        }
        worst.extend(best);
    }
    let fraction = if neighbors == 0 { 0.0 } else { overlapping as f64 / neighbors as f64 };
    Ok(LeakageReport {
        t,
        sequences: samples.len(),
        neighbors,
        overlapping,
        fraction,
        mean_jaccard: if neighbors == 0 { 0.0 } else { jsum / neighbors as f64 },
        jaccard_hist: hist,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_samples;
    use crate::ivf::exact_search;

    fn spec() -> EmbedderSpec {
        EmbedderSpec::hash(64, 3)
    }

    fn doc(tokens: Vec<TokenId>, id: u32, start: usize) -> TokenSequence {
        TokenSequence::with_origin(tokens, id, start)
    }

    fn params(k: usize, filter: bool) -> RetrievalParams {
        RetrievalParams {
            k,
            nprobe: usize::MAX,
            filter_continuations: filter,
        }
    }

    #[test]
    fn adjacency_and_boundaries() {
        let s = spec();
        let (db, idx, rep) = build_db(&[doc((0..8).collect(), 0, 0)], 4, 50, &s, s, 0).unwrap();
        assert_eq!(db.len(), 2);
        assert_eq!(idx.len(), 2);
        assert_eq!(rep.entries, 2);
        assert_eq!(db.entries[0].value_tokens, db.entries[1].key_tokens);
        assert_eq!(db.entries[1].value_len, 0);

        let (db, _, _) = build_db(&[doc((0..4).collect(), 0, 0)], 4, 50, &s, s, 0).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.entries[0].value_len, 0);
        assert_eq!(db.entries[0].value_tokens, vec![0; 4]);
    }

    #[test]
    fn short_documents_are_skipped() {
        let s = spec();
        let docs = [doc(vec![1, 2], 0, 0), doc((10..22).collect(), 1, 2)];
        let (db, _, rep) = build_db(&docs, 4, 50, &s, s, 0).unwrap();
        assert_eq!(rep.skipped_docs, vec![0]);
        assert_eq!(db.len(), 3);
        assert_eq!(db.entries[2].stream_offset, 2 + 8);
        assert_eq!(db.entries[2].value_len, 0);
        assert!(build_db(&docs[..1], 4, 50, &s, s, 0).is_err());
    }

    #[test]
    fn identical_key_is_rank_one_at_distance_zero() {
        let s = spec();
        let tokens: Vec<TokenId> = (0..64).map(|i| (i * 7 % 41) as TokenId).collect();
        let (db, idx, _) = build_db(&[doc(tokens.clone(), 0, 0)], 4, 50, &s, s, 0).unwrap();
        let q = TokenSequence::with_origin(tokens[20..28].to_vec(), 9, 1_000_000);
        let set = get_neighbors(&db, &idx, &s, &q, params(2, false)).unwrap();
        assert_eq!(set.get(0, 0).source, Some(5));
        assert!(set.get(0, 0).distance.abs() < 1e-6);
        assert_eq!(&set.get(1, 0).tokens[..4], &tokens[24..28]);
    }

    #[test]
    fn filter_excludes_own_and_adjacent_chunks() {
        // 4-chunk document retrieving against itself
        let s = spec();
        let tokens: Vec<TokenId> = (0..16).collect();
        let (db, idx, _) = build_db(&[doc(tokens.clone(), 0, 0)], 4, 50, &s, s, 0).unwrap();
        let q = TokenSequence::with_origin(tokens[4..8].to_vec(), 0, 4);
        let set = get_neighbors(&db, &idx, &s, &q, params(4, true)).unwrap();
        let got: HashSet<_> = set.records.iter().filter_map(|r| r.source).collect();
        // entry 1 is the query chunk, 2 its continuation, 0 its predecessor
        assert_eq!(got, HashSet::from([3]));
        assert!(set.repeated[0]);
        let unfiltered = get_neighbors(&db, &idx, &s, &q, params(4, false)).unwrap();
        assert_eq!(unfiltered.get(0, 0).source, Some(1));
        assert!(!unfiltered.repeated[0]);
    }

    #[test]
    fn zero_survivors_give_padding_rows() {
        let s = spec();
        let tokens: Vec<TokenId> = (0..8).collect();
        let (db, idx, _) = build_db(&[doc(tokens.clone(), 0, 0)], 4, 50, &s, s, 0).unwrap();
        let q = TokenSequence::with_origin(tokens[..4].to_vec(), 0, 0);
        let set = get_neighbors(&db, &idx, &s, &q, params(3, true)).unwrap();
        assert!(set.repeated[0]);
        assert!(set.records.iter().all(|r| r.source.is_none() && r.valid.iter().all(|&v| !v)));
    }

    #[test]
    fn shape_law_and_oracle_agreement() {
        let s = spec();
        let docs: Vec<TokenSequence> = (0..6)
            .map(|d| doc((0..40).map(|i| ((i * 13 + d * 7) % 97) as TokenId).collect(), d as u32, d * 40))
            .collect();
        let (db, idx, _) = build_db(&docs, 8, 100, &s, s, 1).unwrap();
        let q = TokenSequence::new((0..32).map(|i| (i * 5 % 97) as TokenId).collect());
        let set = get_neighbors(&db, &idx, &s, &q, params(3, false)).unwrap();
        assert_eq!((set.n_chunks, set.k, set.records.len()), (4, 3, 12));
        assert!(set.records.iter().all(|r| r.tokens.len() == 16 && r.valid.len() == 16));
        let ids: Vec<EntryId> = (0..db.len() as EntryId).collect();
        for c in 0..4 {
            let e = s.embed(&q.tokens[c * 8..(c + 1) * 8]).unwrap();
            let truth = exact_search(&db.embeddings.data, &ids, 64, Metric::L2, e.as_slice(), 1).unwrap();
            assert_eq!(set.get(c, 0).source, Some(truth.ids[0]));
        }
    }

    #[test]
    fn filter_soundness_on_a_stream() {
        let s = spec();
        let corpus = Corpus::from_token_docs(
            (0..5).map(|d| (0..48).map(|i| ((i * 3 + d * 11) % 60) as TokenId).collect()).collect(),
            60,
        );
        let docs = corpus_documents(&corpus);
        let (db, idx, _) = build_db(&docs, 4, 60, &s, s, 2).unwrap();
        let samples = make_samples(&corpus.stream(), 16).samples;
        let store = precompute_neighbors(&db, &idx, &s, &samples, params(3, true)).unwrap();
        for r in &store.records {
            for c in 0..r.neighbors.n_chunks {
                let q = r.offset as usize + c * 4;
                for rank in 0..3 {
                    if let Some(id) = r.neighbors.get(c, rank).source {
                        let e = &db.entries[id as usize];
                        assert!(!(e.stream_offset + 8 > q && e.stream_offset < q + 8), "chunk at {q} got entry at {}", e.stream_offset);
                    }
                }
            }
        }
    }

    #[test]
    fn store_and_db_round_trip() {
        let s = spec();
        let corpus = Corpus::from_token_docs(vec![(0..100).map(|i| (i % 37) as TokenId).collect()], 40);
        let (db, idx, _) = build_db(&corpus_documents(&corpus), 4, 40, &s, s, 0).unwrap();
        let samples = make_samples(&corpus.stream(), 16).samples;
        let store = precompute_neighbors(&db, &idx, &s, &samples, params(3, true)).unwrap();
        assert_eq!(store.len(), 6);
        assert_eq!(store.records[0].neighbors.records.len(), 12);
        let bytes = encode_store(&store);
        assert_eq!(decode_store(&bytes).unwrap(), store);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(decode_store(&bad), Err(Error::Checksum(_))));
        assert!(decode_store(&bytes[..bytes.len() - 3]).is_err());

        let dbb = encode_db(&db);
        assert_eq!(decode_db(&dbb).unwrap(), db);
        let dir = tempfile::tempdir().unwrap();
        save_store(&dir.path().join("s.bin"), &store).unwrap();
        assert_eq!(load_store(&dir.path().join("s.bin")).unwrap(), store);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_1gram(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(jaccard_1gram(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard_1gram(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(jaccard_1gram(&[], &[]), 1.0);
    }

    #[test]
    fn contiguous_overlap_examples() {
        let a: Vec<TokenId> = (1..=20).collect();
        assert!(contiguous_overlap(&a[..8], &a[..8], 8));
        assert!(!contiguous_overlap(&[1, 2, 3], &[4, 5, 6], 1));
        let b = [50, 51, 5, 6, 7, 8, 9, 10, 11, 12, 99];
        assert!(contiguous_overlap(&a, &b, 8));
        assert!(!contiguous_overlap(&a, &b, 9));
    }

    fn set_of(records: Vec<Vec<TokenId>>, k: usize) -> NeighborSet {
        let chunk_len = records[0].len() / 2;
        let n_chunks = records.len() / k;
        NeighborSet {
            n_chunks,
            k,
            chunk_len,
            records: records
                .into_iter()
                .enumerate()
                .map(|(i, tokens)| NeighborRecord {
                    valid: vec![true; tokens.len()],
                    tokens,
                    distance: 0.0,
                    source: Some(i as EntryId),
                })
                .collect(),
            repeated: vec![false; n_chunks],
        }
    }

    #[test]
    fn leakage_extremes() {
        let seq: Vec<TokenId> = (0..8).collect();
        let same = set_of(vec![seq.clone(); 4], 2);
        let r = leakage_report(&[&seq], &[same], 8).unwrap();
        assert_eq!(r.fraction, 1.0);
        assert_eq!(r.jaccard_hist[JACCARD_BINS - 1], 4);
        let other = set_of(vec![(100..108).collect(); 4], 2);
        let r = leakage_report(&[&seq], &[other], 8).unwrap();
        assert_eq!(r.fraction, 0.0);
        assert_eq!(r.jaccard_hist[0], 4);
    }
}
