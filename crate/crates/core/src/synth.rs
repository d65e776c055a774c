//! Synthetic key/value retrieval task.
//!
//! Keys and values are uniformly random chunks. The retrieval database holds
//! every `[key, value]` pair as its own document; training streams use one
//! subset of keys and validation streams another, so a value is only
//! predictable through retrieval.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{SequenceSample, TokenId, TokenSequence};
use crate::noise::{derive_rng, stream_id};

#[derive(Debug, Clone, PartialEq)]
pub struct KeyValueTask {
    pub chunk_len: usize,
    pub vocab_size: u32,
    pub keys: Vec<Vec<TokenId>>,
    pub values: Vec<Vec<TokenId>>,
    /// Pairs `0..n_train` feed training; the rest are held out for validation.
    pub n_train: usize,
}

impl KeyValueTask {
    pub fn generate(n_pairs: usize, n_train: usize, chunk_len: usize, vocab_size: u32, seed: u64) -> Self {
        assert!(n_train <= n_pairs);
        let mut rng = derive_rng(seed, stream_id(&[0x4b56]));
        let chunk = |rng: &mut crate::noise::NoiseRng| -> Vec<TokenId> {
            (0..chunk_len).map(|_| rng.random_range(0..vocab_size)).collect()
        };
        let keys = (0..n_pairs).map(|_| chunk(&mut rng)).collect();
        let values = (0..n_pairs).map(|_| chunk(&mut rng)).collect();
        Self {
            chunk_len,
            vocab_size,
            keys,
            values,
            n_train,
        }
    }

    /// One document per pair, laid out at disjoint stream offsets.
    pub fn db_docs(&self) -> Vec<TokenSequence> {
        (0..self.keys.len())
            .map(|i| {
                let mut t = self.keys[i].clone();
                t.extend_from_slice(&self.values[i]);
                TokenSequence::with_origin(t, i as u32, i * 2 * self.chunk_len)
            })
            .collect()
    }

    /// Concatenated pairs and a mask marking value tokens.
    pub fn stream(&self, pairs: &[usize]) -> (Vec<TokenId>, Vec<bool>) {
        let l = self.chunk_len;
        let mut toks = Vec::with_capacity(pairs.len() * 2 * l);
        let mut mask = Vec::with_capacity(toks.capacity());
        for &p in pairs {
            toks.extend_from_slice(&self.keys[p]);
            toks.extend_from_slice(&self.values[p]);
            mask.extend(std::iter::repeat_n(false, l));
            mask.extend(std::iter::repeat_n(true, l));
        }
        (toks, mask)
    }

    fn draw(&self, range: std::ops::Range<usize>, n: usize, seed: u64, tag: u64) -> Vec<usize> {
        let ids: Vec<usize> = range.collect();
        let mut rng = derive_rng(seed, stream_id(&[tag]));
        (0..n).map(|_| *ids.choose(&mut rng).expect("non-empty key set")).collect()
    }

    /// `n` training samples of `seq_len + 1` tokens, each a run of random training pairs.
    pub fn train_samples(&self, n: usize, seq_len: usize, seed: u64) -> Vec<SequenceSample> {
        let per = seq_len / (2 * self.chunk_len) + 1;
        let picks = self.draw(0..self.n_train, n * per, seed, 0x7472);
        let base = self.keys.len() * 2 * self.chunk_len;
        picks
            .chunks(per)
            .enumerate()
            .map(|(i, p)| {
                let (t, _) = self.stream(p);
                let offset = base + i * 2 * per * self.chunk_len;
                SequenceSample {
                    src: TokenSequence::with_origin(t[..seq_len].to_vec(), 0, offset),
                    tgt: TokenSequence::with_origin(t[1..=seq_len].to_vec(), 0, offset + 1),
                }
            })
            .collect()
    }

    /// A validation stream of `n_pairs` held-out pairs plus one trailing key token.
    pub fn valid_stream(&self, n_pairs: usize, seed: u64) -> (TokenSequence, Vec<bool>) {
        let mut picks = self.draw(self.n_train..self.keys.len(), n_pairs + 1, seed, 0x7661);
        let last = picks.pop().expect("n_pairs + 1 picks");
        let (mut t, mut m) = self.stream(&picks);
        t.push(self.keys[last][0]);
        m.push(false);
        (TokenSequence::new(t), m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let task = KeyValueTask::generate(10, 6, 4, 32, 1);
        let s = task.train_samples(3, 16, 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].src.tokens.len(), 16);
        assert_eq!(s[0].src.tokens[1..], s[0].tgt.tokens[..15]);
        let (v, m) = task.valid_stream(5, 3);
        assert_eq!(v.len(), 41);
        assert_eq!(m.iter().filter(|&&x| x).count(), 20);
        // validation pairs are all held out
        let k = &v.tokens[0..4];
        assert!(task.keys[6..].iter().any(|x| x == k));
        assert_eq!(task.db_docs().len(), 10);
    }
}
