//! Perplexity (sliding-window and full), plug-and-play domain evaluation,
//! noisy-retrieval sweeps, generation and semantic similarity.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence};
use crate::embed::{dot, ChunkEmbedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::ivf::IvfIndex;
use crate::model::{ForwardMode, Model, ModelMode, NeighborTokens, NoisePlan, SeqInput};
use crate::noise::{derive_rng, stream_id, Regularizer};
use crate::par;
use crate::retrodb::{build_db, get_neighbors, RetrievalDb, RetrievalParams};

/// Inference setting of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Off,
    OnNoNeighbors,
    OnIdeal,
    /// Gaussian read noise of relative std `λ_i` on the neighbor embeddings.
    OnNoisy(f64),
}

impl EvalMode {
    /// Parses `off | on-no-neighbors | on-ideal | on-noisy`; `lambda_i` only applies to the last.
    pub fn parse(s: &str, lambda_i: f64) -> Result<Self> {
        match s {
            "off" => Ok(EvalMode::Off),
            "on-no-neighbors" => Ok(EvalMode::OnNoNeighbors),
            "on-ideal" => Ok(EvalMode::OnIdeal),
            "on-noisy" if lambda_i >= 0.0 => Ok(EvalMode::OnNoisy(lambda_i)),
            "on-noisy" => Err(Error::Config(format!("lambda_i must be >= 0, got {lambda_i}"))),
            _ => Err(Error::Config(format!("unknown eval mode '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Off => "off",
            EvalMode::OnNoNeighbors => "on-no-neighbors",
            EvalMode::OnIdeal => "on-ideal",
            EvalMode::OnNoisy(_) => "on-noisy",
        }
    }

    pub fn lambda_i(self) -> f64 {
        match self {
            EvalMode::OnNoisy(l) => l,
            _ => 0.0,
        }
    }

    fn needs_retrieval(self) -> bool {
        matches!(self, EvalMode::OnIdeal | EvalMode::OnNoisy(_))
    }

    fn forward_mode(self) -> ForwardMode {
        match self {
            EvalMode::Off => ForwardMode::Off,
            EvalMode::OnNoNeighbors => ForwardMode::NoNeighbors,
            _ => ForwardMode::On,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::OnNoisy(l) => write!(f, "on-noisy({l})"),
            m => f.write_str(m.name()),
        }
    }
}

/// Where retrieval-mode evaluations get their neighbors.
#[derive(Clone, Copy)]
pub enum NeighborSource<'a> {
    None,
    Retrieval {
        db: &'a RetrievalDb,
        index: &'a IvfIndex,
        embedder: &'a dyn ChunkEmbedder,
        params: RetrievalParams,
    },
}

impl NeighborSource<'_> {
    /// Neighbors for the window `tokens` starting at stream offset `offset`.
    pub fn fetch(&self, tokens: &[TokenId], doc_id: u32, offset: usize) -> Result<NeighborTokens> {
        match self {
            NeighborSource::None => Err(Error::InvalidArgument("this mode needs a retrieval database".into())),
            NeighborSource::Retrieval {
                db,
                index,
                embedder,
                params,
            } => {
                let seq = TokenSequence::with_origin(tokens.to_vec(), doc_id, offset);
                Ok(get_neighbors(db, index, *embedder, &seq, *params)?.to_tokens())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// `off`, `on-no-neighbors`, `on-ideal` or `on-noisy`.
    pub mode: String,
    pub lambda_i: f64,
    /// Train-time regularizer label of the evaluated model.
    pub regularizer: String,
    pub perplexity: f64,
    pub total_nll: f64,
    pub tokens_scored: u64,
    pub seed: u64,
}

/// Summed NLL over scored targets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub total_nll: f64,
    pub tokens_scored: u64,
}

impl Scores {
    pub fn add(&mut self, other: Scores) {
        self.total_nll += other.total_nll;
        self.tokens_scored += other.tokens_scored;
    }

    pub fn perplexity(&self) -> f64 {
        (self.total_nll / self.tokens_scored as f64).exp()
    }
}

/// A window starting at `start` whose targets `first_target..=start + seq_len` are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub first_target: usize,
}

/// Windows of `seq_len` at multiples of `stride`, plus one end-aligned window for any remainder.
///
/// Target `j` (predicting `tokens[j]`) is scored by exactly one window, for
/// `1 <= j < n_tokens`.
pub fn window_plan(n_tokens: usize, seq_len: usize, stride: usize) -> Result<Vec<Window>> {
    if seq_len == 0 || stride == 0 || stride > seq_len {
        return Err(Error::Config(format!("bad window: seq_len {seq_len}, stride {stride}")));
    }
    if n_tokens < seq_len + 1 {
        return Err(Error::InvalidArgument(format!(
            "text of {n_tokens} tokens is shorter than one window of {} tokens",
            seq_len + 1
        )));
    }
    let last = n_tokens - 1 - seq_len;
    let mut out = vec![Window {
        start: 0,
        first_target: 1,
    }];
    let mut covered = seq_len;
    let mut s = stride;
    while s <= last {
        out.push(Window {
            start: s,
            first_target: covered + 1,
        });
        covered = s + seq_len;
        s += stride;
    }
    if covered < n_tokens - 1 {
        out.push(Window {
            start: last,
            first_target: covered + 1,
        });
    }
    Ok(out)
}

pub fn sliding_stride(seq_len: usize) -> usize {
    (seq_len / 4).max(1)
}

/// `-log p(target)` per position from one row of logits.
fn nll_row(logits: &[f32], target: TokenId) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    let lse = logits.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>().ln() + max;
    lse - f64::from(logits[target as usize])
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    let e: Vec<f64> = logits.iter().map(|&x| (f64::from(x) - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Everything one evaluation pass needs besides the tokens.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub model: &'a Model,
    pub mode: EvalMode,
    pub source: NeighborSource<'a>,
    /// Seed of the read-noise draws in `OnNoisy`.
    pub seed: u64,
}

const EVAL_NOISE_STREAM: u64 = 0xe7a1_0000;

impl EvalContext<'_> {
    /// Logits `[seq_len, vocab]` of the window of `tokens` starting at `start`.
    fn window_logits(&self, tokens: &[TokenId], doc_id: u32, base_offset: usize, start: usize, window_id: u64) -> Result<Vec<f32>> {
        let cfg = self.model.config();
        let src = &tokens[start..start + cfg.seq_len];
        let neighbors = if self.mode.needs_retrieval() {
            Some(self.source.fetch(src, doc_id, base_offset + start)?)
        } else {
            None
        };
        let noise = match self.mode {
            EvalMode::OnNoisy(lambda) => NoisePlan {
                sequence: None,
                neighbors: Some(Regularizer::Gaussian { lambda }),
                seed: self.seed,
                stream: EVAL_NOISE_STREAM,
                offset: window_id,
            },
            _ => NoisePlan::none(),
        };
        let input = SeqInput {
            src,
            neighbors: neighbors.as_ref(),
        };
        Ok(self.model.forward(&[input], self.mode.forward_mode(), &noise)?.data)
    }

    fn check(&self) -> Result<()> {
        if self.mode != EvalMode::Off && self.model.mode() != ModelMode::On {
            return Err(Error::InvalidArgument(format!("mode {} needs a retrieval-enabled model", self.mode)));
        }
        Ok(())
    }

    /// Windowed NLL over `seq.tokens`; `score` (indexed by target position) restricts the scored targets.
    pub fn score(&self, seq: &TokenSequence, stride: usize, score: Option<&[bool]>) -> Result<Scores> {
        self.check()?;
        let cfg = self.model.config();
        let tokens = &seq.tokens;
        if let Some(m) = score {
            if m.len() != tokens.len() {
                return Err(Error::Shape(format!("score mask of {} for {} tokens", m.len(), tokens.len())));
            }
        }
        let plan = window_plan(tokens.len(), cfg.seq_len, stride)?;
        let v = cfg.vocab_size;
        let per_window = par::map_range(plan.len(), |w| -> Result<Scores> {
            let win = plan[w];
            let logits = self.window_logits(tokens, seq.doc_id, seq.offset, win.start, seq.offset as u64 + win.start as u64)?;
            let mut s = Scores::default();
            for j in win.first_target..=win.start + cfg.seq_len {
                if score.is_some_and(|m| !m[j]) {
                    continue;
                }
                let p = j - 1 - win.start;
                s.total_nll += nll_row(&logits[p * v..(p + 1) * v], tokens[j]);
                s.tokens_scored += 1;
            }
            Ok(s)
        });
        let mut total = Scores::default();
        for s in per_window {
            total.add(s?);
        }
        Ok(total)
    }
}

pub fn report(dataset: &str, ctx: &EvalContext, regularizer: &str, scores: Scores) -> Result<EvalReport> {
    if scores.tokens_scored == 0 {
        return Err(Error::InvalidArgument("no tokens were scored".into()));
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        mode: ctx.mode.name().to_string(),
        lambda_i: ctx.mode.lambda_i(),
        regularizer: regularizer.to_string(),
        perplexity: scores.perplexity(),
        total_nll: scores.total_nll,
        tokens_scored: scores.tokens_scored,
        seed: ctx.seed,
    })
}

/// Stride `seq_len / 4`: every scored token sees at least 75% of a window as context.
pub fn sliding_window_perplexity(ctx: &EvalContext, seq: &TokenSequence, score: Option<&[bool]>) -> Result<Scores> {
    ctx.score(seq, sliding_stride(ctx.model.config().seq_len), score)
}

/// Non-overlapping windows (stride `seq_len`).
pub fn full_perplexity(ctx: &EvalContext, seq: &TokenSequence, score: Option<&[bool]>) -> Result<Scores> {
    ctx.score(seq, ctx.model.config().seq_len, score)
}

/// A domain prepared for plug-and-play evaluation: its database and validation documents.
pub struct PreparedDomain {
    pub name: String,
    pub db: RetrievalDb,
    pub index: IvfIndex,
    pub valid: Vec<TokenSequence>,
    pub nprobe: usize,
}

impl PreparedDomain {
    /// Builds the database from `train` docs; validation docs stay separate, so nothing is filtered.
    pub fn build(
        name: &str,
        train: &[TokenSequence],
        valid: Vec<TokenSequence>,
        chunk_len: usize,
        vocab_size: u32,
        embedder: EmbedderSpec,
        seed: u64,
    ) -> Result<Self> {
        if train.iter().all(|d| d.is_empty()) || valid.iter().all(|d| d.is_empty()) {
            return Err(Error::Empty);
        }
        let (db, index, rep) = build_db(train, chunk_len, vocab_size, &embedder, embedder, seed)?;
        Ok(Self {
            name: name.to_string(),
            db,
            index,
            valid,
            nprobe: rep.nprobe,
        })
    }

    pub fn source(&self, k: usize) -> NeighborSource<'_> {
        NeighborSource::Retrieval {
            db: &self.db,
            index: &self.index,
            embedder: &self.db.embedder,
            params: RetrievalParams {
                k,
                nprobe: self.nprobe,
                filter_continuations: false,
            },
        }
    }
}

/// Sliding-window perplexity over every long-enough validation document; no parameter updates.
pub fn plug_and_play_eval(model: &Model, domain: &PreparedDomain, mode: EvalMode, seed: u64, regularizer: &str) -> Result<EvalReport> {
    let ctx = EvalContext {
        model,
        mode,
        source: domain.source(model.config().k_neighbors),
        seed,
    };
    let mut total = Scores::default();
    let mut used = 0;
    for doc in &domain.valid {
        if doc.len() <= model.config().seq_len {
            continue;
        }
        total.add(sliding_window_perplexity(&ctx, doc, None)?);
        used += 1;
    }
    if used == 0 {
        return Err(Error::CorpusTooSmall(format!(
            "no validation document of domain '{}' is longer than seq_len",
            domain.name
        )));
    }
    report(&domain.name, &ctx, regularizer, total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub regularizer: String,
    pub lambda_i: f64,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 with `single_seed` set when only one seed ran.
    pub std: f64,
    pub seeds: usize,
    pub single_seed: bool,
    pub perplexities: Vec<f64>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

pub const DEFAULT_LAMBDAS: [f64; 4] = [0.0, 0.2, 0.4, 1.0];

/// Perplexity mean and spread per `λ_i` across noise seeds.
pub fn noisy_retrieval_sweep(
    model: &Model,
    domain: &PreparedDomain,
    lambdas: &[f64],
    seeds: &[u64],
    regularizer: &str,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("noise sweep needs at least one lambda and one seed".into()));
    }
    lambdas
        .iter()
        .map(|&l| {
            let reports = seeds
                .iter()
                .map(|&s| plug_and_play_eval(model, domain, EvalMode::OnNoisy(l), s, regularizer))
                .collect::<Result<Vec<_>>>()?;
            let p: Vec<f64> = reports.iter().map(|r| r.perplexity).collect();
            let (mean, std) = mean_std(&p);
            Ok(SweepRow {
                regularizer: regularizer.to_string(),
                lambda_i: l,
                mean,
                std,
                seeds: p.len(),
                single_seed: p.len() == 1,
                perplexities: p,
                reports,
            })
        })
        .collect()
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("regularizer,lambda_i,mean,std,seeds,single_seed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.regularizer, r.lambda_i, r.mean, r.std, r.seeds, r.single_seed
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Multinomial,
    TopP(f64),
}

impl Sampling {
    pub fn parse(s: &str, p: f64) -> Result<Self> {
        match s {
            "greedy" => Ok(Sampling::Greedy),
            "multinomial" => Ok(Sampling::Multinomial),
            "top-p" | "top_p" => {
                check_p(p)?;
                Ok(Sampling::TopP(p))
            }
            _ => Err(Error::Config(format!("unknown sampling mode '{s}'"))),
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("top-p needs 0 < p <= 1, got {p}")))
    }
}

/// Smallest prefix of the descending-probability order whose mass reaches `p`, renormalized.
///
/// The token that crosses `p` is included. Ties sort by lower token id.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(usize, f64)>> {
    check_p(p)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut mass = 0.0;
    for i in order {
        if probs[i] <= 0.0 {
            break;
        }
        keep.push(i);
        mass += probs[i];
        if p < 1.0 && mass >= p {
            break;
        }
    }
    Ok(keep.into_iter().map(|i| (i, probs[i] / mass)).collect())
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn sample_from(support: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in support {
        acc += p;
        if u < acc {
            return i;
        }
    }
    support.last().expect("non-empty support").0
}

/// Draws one token from `probs` under `sampling`.
pub fn sample_token(probs: &[f64], sampling: Sampling, rng: &mut impl Rng) -> Result<usize> {
    Ok(match sampling {
        Sampling::Greedy => argmax(probs),
        Sampling::Multinomial => sample_from(&nucleus(probs, 1.0)?, rng),
        Sampling::TopP(p) => sample_from(&nucleus(probs, p)?, rng),
    })
}

/// Autoregressive decoding of `n_tokens` after `context` inside one window.
///
/// The window is right-padded to `seq_len`; causal attention keeps the
/// padding from influencing the positions that are read.
pub fn generate(
    ctx: &EvalContext,
    context: &[TokenId],
    sampling: Sampling,
    n_tokens: usize,
) -> Result<Vec<TokenId>> {
    ctx.check()?;
    let cfg = ctx.model.config();
    if let Sampling::TopP(p) = sampling {
        check_p(p)?;
    }
    if context.is_empty() || context.len() + n_tokens > cfg.seq_len {
        return Err(Error::InvalidArgument(format!(
            "context of {} tokens plus {n_tokens} new ones must fit in seq_len {} (and the context must be non-empty)",
            context.len(),
            cfg.seq_len
        )));
    }
    let mut rng = derive_rng(ctx.seed, stream_id(&[0x6e_6e, context.len() as u64]));
    let mut buf = context.to_vec();
    let v = cfg.vocab_size;
    for _ in 0..n_tokens {
        let mut window = buf.clone();
        window.resize(cfg.seq_len, 0);
        let logits = ctx.window_logits(&window, 0, 0, 0, 0)?;
        let p = buf.len() - 1;
        let probs = softmax(&logits[p * v..(p + 1) * v]);
        buf.push(sample_token(&probs, sampling, &mut rng)? as TokenId);
    }
    Ok(buf.split_off(context.len()))
}

/// Dot product of the two texts' embeddings (unit vectors, so in `[-1, 1]`).
pub fn semantic_similarity(generated: &[TokenId], reference: &[TokenId], embedder: &dyn ChunkEmbedder) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("semantic similarity of an empty text".into()));
    }
    let a = embedder.embed(generated)?;
    let b = embedder.embed(reference)?;
    Ok(f64::from(dot(a.as_slice(), b.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 17,
            seq_len: 8,
            chunk_len: 4,
            k_neighbors: 2,
            cca_layers: vec![2],
            d_emb: 16,
            neighbor_encoder_layers: 1,
            seed: 9,
        }
    }

    #[test]
    fn two_window_toy_plan() {
        let p = window_plan(11, 8, 2).unwrap();
        assert_eq!(
            p,
            vec![
                Window { start: 0, first_target: 1 },
                Window { start: 2, first_target: 9 }
            ]
        );
        // 12 tokens: regular windows at 0, 2; tail aligned at 3
        let p = window_plan(12, 8, 2).unwrap();
        assert_eq!(p.last(), Some(&Window { start: 3, first_target: 11 }));
        assert!(window_plan(8, 8, 2).is_err());
    }

    #[test]
    fn every_target_scored_once() {
        for n in 9..60 {
            for stride in [1, 2, 3, 8] {
                let plan = window_plan(n, 8, stride).unwrap();
                let mut hits = vec![0; n];
                for w in &plan {
                    for j in w.first_target..=w.start + 8 {
                        hits[j] += 1;
                        // at least seq_len - stride tokens of context
                        assert!(w.first_target == 1 || j - w.start >= 8 - stride);
                    }
                }
                assert_eq!(hits[0], 0);
                assert!(hits[1..].iter().all(|&h| h == 1), "n={n} stride={stride}");
            }
        }
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = build_model(&cfg(), ModelMode::Off).unwrap();
        for name in ["w_out", "b_out"] {
            m.param_mut(name).unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        }
        let ctx = EvalContext {
            model: &m,
            mode: EvalMode::Off,
            source: NeighborSource::None,
            seed: 0,
        };
        let toks: Vec<TokenId> = (0..30).map(|i| (i * 7 % 17) as TokenId).collect();
        let s = sliding_window_perplexity(&ctx, &TokenSequence::new(toks), None).unwrap();
        assert_eq!(s.tokens_scored, 29);
        assert!((s.perplexity() / 17.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn certain_model_has_perplexity_one() {
        // bias pushes all mass onto token 3; text is all 3s
        let mut m = build_model(&cfg(), ModelMode::Off).unwrap();
        m.param_mut("w_out").unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        m.param_mut("b_out").unwrap().data[3] = 1e4;
        let ctx = EvalContext {
            model: &m,
            mode: EvalMode::Off,
            source: NeighborSource::None,
            seed: 0,
        };
        let s = full_perplexity(&ctx, &TokenSequence::new(vec![3; 20]), None).unwrap();
        assert_eq!(s.perplexity(), 1.0);
    }

    #[test]
    fn score_mask_restricts_targets() {
        let m = build_model(&cfg(), ModelMode::Off).unwrap();
        let ctx = EvalContext {
            model: &m,
            mode: EvalMode::Off,
            source: NeighborSource::None,
            seed: 0,
        };
        let seq = TokenSequence::new((0..21).map(|i| (i % 17) as TokenId).collect());
        let mask: Vec<bool> = (0..21).map(|i| i % 3 == 0).collect();
        let all = sliding_window_perplexity(&ctx, &seq, None).unwrap();
        let some = sliding_window_perplexity(&ctx, &seq, Some(&mask)).unwrap();
        assert_eq!(some.tokens_scored, 6);
        assert!(some.total_nll < all.total_nll);
    }

    #[test]
    fn nucleus_examples() {
        let probs = [0.5, 0.3, 0.2];
        let n = nucleus(&probs, 0.75).unwrap();
        assert_eq!(n.len(), 2);
        assert!((n[0].1 - 0.625).abs() < 1e-12 && (n[1].1 - 0.375).abs() < 1e-12);
        // 0.5 + 0.3 < 0.9, so the crossing token c is the third
        assert_eq!(nucleus(&probs, 0.9).unwrap().len(), 3);
        assert_eq!(nucleus(&probs, 0.5).unwrap(), vec![(0, 1.0)]);
        assert_eq!(
            nucleus(&probs, 1.0).unwrap().iter().map(|x| x.0).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(nucleus(&probs, 0.0).is_err() && nucleus(&probs, 1.5).is_err());
        // ties resolve to the lower id
        assert_eq!(nucleus(&[0.25, 0.5, 0.25], 0.6).unwrap()[1].0, 0);
    }

    #[test]
    fn greedy_tie_takes_lowest_id() {
        let mut rng = derive_rng(0, 0);
        assert_eq!(sample_token(&[0.1, 0.45, 0.45], Sampling::Greedy, &mut rng).unwrap(), 1);
    }

    #[test]
    fn generation_contract() {
        let m = build_model(&cfg(), ModelMode::On).unwrap();
        let ctx = EvalContext {
            model: &m,
            mode: EvalMode::OnNoNeighbors,
            source: NeighborSource::None,
            seed: 4,
        };
        let a = generate(&ctx, &[1, 2, 3], Sampling::TopP(0.9), 5).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, generate(&ctx, &[1, 2, 3], Sampling::TopP(0.9), 5).unwrap());
        assert!(generate(&ctx, &[1, 2, 3, 4], Sampling::Greedy, 5).is_err());
        assert!(generate(&ctx, &[1], Sampling::TopP(0.0), 1).is_err());
    }

    #[test]
    fn similarity_of_identical_text_is_one() {
        let e = EmbedderSpec::hash(32, 1);
        let x = [4, 8, 15, 16, 23, 42];
        assert!((semantic_similarity(&x, &x, &e).unwrap() - 1.0).abs() < 1e-6);
        assert!(semantic_similarity(&[], &x, &e).is_err());
    }

    #[test]
    fn sweep_statistics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
