//! Text normalization, tokenization, chunking and training-sample construction.

use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// A run of tokens with its provenance inside a token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub doc_id: u32,
    /// Start position of `tokens[0]` within the stream identified by `doc_id`.
    pub offset: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            doc_id: 0,
            offset: 0,
        }
    }

    pub fn with_origin(tokens: Vec<TokenId>, doc_id: u32, offset: usize) -> Self {
        Self {
            tokens,
            doc_id,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: u32) -> Result<()> {
        check_ids(&self.tokens, vocab_size)
    }
}

/// A fixed-length window of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: Vec<TokenId>,
    pub doc_id: u32,
    pub offset: usize,
}

/// One training/eval pair: `tgt` is `src` advanced by one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    pub src: TokenSequence,
    pub tgt: TokenSequence,
}

/// Samples cut from a stream; `too_short` is set when the stream could not fill one window.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub samples: Vec<SequenceSample>,
    pub too_short: bool,
}

/// NFC, lowercase, whitespace runs collapsed to one space, trimmed.
pub fn normalize_text(raw: &str) -> String {
    let folded: String = raw.nfc().collect::<String>().to_lowercase().nfc().collect();
    let mut out = String::with_capacity(folded.len());
    for word in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// A closed-vocabulary tokenizer.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> u32;
    fn encode(&self, text: &str) -> Vec<TokenId>;
    /// Best-effort inverse of [`Tokenizer::encode`]; ids are validated by the caller.
    fn decode(&self, tokens: &[TokenId]) -> String;
}

/// Maps each UTF-8 byte to its value; vocabulary of 256.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> u32 {
        256
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
        // byte arrays that are not UTF-8 decode lossily
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

fn check_ids(tokens: &[TokenId], vocab_size: u32) -> Result<()> {
    match tokens.iter().position(|&t| t >= vocab_size) {
        Some(position) => Err(Error::TokenOutOfRange {
            position,
            id: tokens[position],
            vocab_size,
        }),
        None => Ok(()),
    }
}

pub fn tokenize(tokenizer: &dyn Tokenizer, text: &str) -> Result<TokenSequence> {
    let tokens = tokenizer.encode(text);
    check_ids(&tokens, tokenizer.vocab_size())?;
    Ok(TokenSequence::new(tokens))
}

pub fn detokenize(tokenizer: &dyn Tokenizer, tokens: &[TokenId]) -> Result<String> {
    check_ids(tokens, tokenizer.vocab_size())?;
    Ok(tokenizer.decode(tokens))
}

pub fn split_into_chunks(seq: &TokenSequence, chunk_len: usize) -> Result<Vec<Chunk>> {
    if chunk_len == 0 || seq.len() % chunk_len != 0 {
        return Err(Error::NotChunkAligned {
            len: seq.len(),
            chunk_len,
        });
    }
    Ok(seq
        .tokens
        .chunks_exact(chunk_len)
        .enumerate()
        .map(|(i, c)| Chunk {
            tokens: c.to_vec(),
            doc_id: seq.doc_id,
            offset: seq.offset + i * chunk_len,
        })
        .collect())
}

/// Non-overlapping windows of `seq_len` with a one-token-shifted target;
/// the trailing remainder is dropped.
pub fn make_samples(stream: &TokenSequence, seq_len: usize) -> Samples {
    let n = stream.len();
    if seq_len == 0 || n < seq_len + 1 {
        return Samples {
            samples: Vec::new(),
            too_short: true,
        };
    }
    let mut samples = Vec::new();
    let mut i = 0;
    while i + seq_len < n {
        let src = &stream.tokens[i..i + seq_len];
        let tgt = &stream.tokens[i + 1..i + seq_len + 1];
        samples.push(SequenceSample {
            src: TokenSequence::with_origin(src.to_vec(), stream.doc_id, stream.offset + i),
            tgt: TokenSequence::with_origin(tgt.to_vec(), stream.doc_id, stream.offset + i + 1),
        });
        i += seq_len;
    }
    Samples {
        samples,
        too_short: false,
    }
}

/// How documents are joined into one token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocJoin {
    /// Plain concatenation.
    #[default]
    Raw,
    /// A separator token between consecutive documents.
    Separator(TokenId),
}

impl std::str::FromStr for DocJoin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(DocJoin::Raw),
            other => match other.strip_prefix("sep:") {
                Some(id) => id
                    .parse()
                    .map(DocJoin::Separator)
                    .map_err(|_| Error::Config(format!("bad separator token '{id}'"))),
                None => Err(Error::Config(format!(
                    "doc join must be 'raw' or 'sep:<id>', got '{other}'"
                ))),
            },
        }
    }
}

/// How documents are laid out in a corpus directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocMode {
    /// Every file is one document.
    #[default]
    File,
    /// Every non-empty line of every file is one document.
    Lines,
}

impl std::str::FromStr for DocMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(DocMode::File),
            "lines" => Ok(DocMode::Lines),
            other => Err(Error::Config(format!(
                "doc mode must be 'file' or 'lines', got '{other}'"
            ))),
        }
    }
}

/// Tokenized documents plus the layout of their concatenated stream.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub docs: Vec<Vec<TokenId>>,
    pub vocab_size: u32,
    pub join: DocJoin,
}

impl Corpus {
    pub fn from_texts<S: AsRef<str>>(texts: &[S], tokenizer: &dyn Tokenizer) -> Result<Self> {
        let docs = texts
            .iter()
            .map(|t| tokenize(tokenizer, &normalize_text(t.as_ref())).map(|s| s.tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            docs,
            vocab_size: tokenizer.vocab_size(),
            join: DocJoin::Raw,
        })
    }

    pub fn from_token_docs(docs: Vec<Vec<TokenId>>, vocab_size: u32) -> Self {
        Self {
            docs,
            vocab_size,
            join: DocJoin::Raw,
        }
    }

    /// Load `*.txt` files from `dir` in file-name order.
    pub fn load_dir(dir: &Path, mode: DocMode, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();
        let mut texts = Vec::new();
        for p in &paths {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            match mode {
                DocMode::File => texts.push(raw),
                DocMode::Lines => texts.extend(
                    raw.lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(str::to_string),
                ),
            }
        }
        if texts.is_empty() {
            return Err(Error::CorpusTooSmall(format!(
                "no .txt documents in {}",
                dir.display()
            )));
        }
        Self::from_texts(&texts, tokenizer)
    }

    pub fn with_join(mut self, join: DocJoin) -> Self {
        self.join = join;
        self
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Stream start position of every document.
    pub fn doc_starts(&self) -> Vec<usize> {
        let sep = usize::from(matches!(self.join, DocJoin::Separator(_)));
        let mut starts = Vec::with_capacity(self.docs.len());
        let mut pos = 0;
        for (i, d) in self.docs.iter().enumerate() {
            if i > 0 {
                pos += sep;
            }
            starts.push(pos);
            pos += d.len();
        }
        starts
    }

    /// All documents joined into one stream with `doc_id` 0 and offset 0.
    pub fn stream(&self) -> TokenSequence {
        let mut tokens = Vec::with_capacity(self.total_tokens() + self.docs.len());
        for (i, d) in self.docs.iter().enumerate() {
            if i > 0 {
                if let DocJoin::Separator(s) = self.join {
                    tokens.push(s);
                }
            }
            tokens.extend_from_slice(d);
        }
        TokenSequence::new(tokens)
    }
}

const STREAM_MAGIC: &[u8; 4] = b"RLTK";
const STREAM_VERSION: u32 = 1;

/// 16-byte header (magic, version, vocab_size, count) then `count` u32 tokens.
pub fn encode_token_stream(tokens: &[TokenId], vocab_size: u32) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(STREAM_MAGIC);
    w.u32(STREAM_VERSION);
    w.u32(vocab_size);
    w.u32(tokens.len() as u32);
    w.u32s(tokens);
    w.buf
}

pub fn decode_token_stream(bytes: &[u8]) -> Result<(Vec<TokenId>, u32)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(STREAM_MAGIC, "token stream")?;
    r.expect_version(STREAM_VERSION, "token stream")?;
    let vocab_size = r.u32()?;
    let count = r.u32()? as usize;
    let tokens = r.u32s(count)?;
    check_ids(&tokens, vocab_size)?;
    Ok((tokens, vocab_size))
}

pub fn save_token_stream(path: &Path, tokens: &[TokenId], vocab_size: u32) -> Result<()> {
    codec::write_atomic(path, &encode_token_stream(tokens, vocab_size))
}

pub fn load_token_stream(path: &Path) -> Result<(Vec<TokenId>, u32)> {
    decode_token_stream(&codec::read_file(path)?)
}
