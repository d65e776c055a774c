//! Decoder transformer with rotary self-attention, chunked cross-attention
//! (CCA) over encoded neighbors, and the neighbor encoder.
//!
//! Layer indices in [`ModelConfig::cca_layers`] are 1-based. A CCA sublayer
//! sits after the self-attention sublayer of its layer. Positions in chunk
//! `i` attend to the encoded neighbors retrieved for chunk `i - 1`; chunk 0
//! has nothing to attend to and passes through unchanged.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, RopeTable, Var};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::noise::{derive_rng, sample_noise, stream_id, Regularizer};
use crate::tensor::{Float, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub chunk_len: usize,
    pub k_neighbors: usize,
    pub cca_layers: Vec<usize>,
    pub d_emb: usize,
    pub neighbor_encoder_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The small CPU configuration.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            seq_len: 128,
            chunk_len: 8,
            k_neighbors: 3,
            cca_layers: vec![3],
            d_emb: 64,
            neighbor_encoder_layers: 2,
            seed: 0,
        }
    }

    /// Every third layer from layer 6 when there are at least 6 layers, else the middle one.
    pub fn default_cca_layers(n_layers: usize) -> Vec<usize> {
        if n_layers >= 6 {
            (6..=n_layers).step_by(3).collect()
        } else {
            vec![n_layers.div_ceil(2).max(1)]
        }
    }

    pub fn n_chunks(&self) -> usize {
        self.seq_len / self.chunk_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn has_cca(&self, layer: usize) -> bool {
        self.cca_layers.contains(&(layer + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("chunk_len", self.chunk_len),
            ("k_neighbors", self.k_neighbors),
            ("neighbor_encoder_layers", self.neighbor_encoder_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size > u32::MAX as usize {
            return bad(format!("vocab_size {} too large", self.vocab_size));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.seq_len % self.chunk_len != 0 {
            return bad(format!("seq_len {} is not a multiple of chunk_len {}", self.seq_len, self.chunk_len));
        }
        if self.d_emb != self.d_model {
            return bad(format!("d_emb {} must equal d_model {}", self.d_emb, self.d_model));
        }
        if self.cca_layers.is_empty() {
            return bad("cca_layers is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.cca_layers {
            if l == 0 || l > self.n_layers {
                return bad(format!("cca layer {l} outside 1..={}", self.n_layers));
            }
            if !seen.insert(l) {
                return bad(format!("cca layer {l} listed twice"));
            }
        }
        Ok(())
    }

    /// Stable hash of every field; checkpoints record it.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        crate::codec::checksum64(text.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Off,
    On,
    NoNeighbors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Attention,
    Ffw,
    Cca,
    Encoder,
    Readout,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Embedding,
        Group::Attention,
        Group::Ffw,
        Group::Cca,
        Group::Encoder,
        Group::Readout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Embedding => "embedding",
            Group::Attention => "attention",
            Group::Ffw => "ffw",
            Group::Cca => "cca",
            Group::Encoder => "encoder",
            Group::Readout => "readout",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    TrainAll,
    FreezeBackboneTrainCca,
    FinetuneFfwReadout,
}

impl FreezePolicy {
    pub fn trains(self, group: Group) -> bool {
        match self {
            FreezePolicy::TrainAll => true,
            FreezePolicy::FreezeBackboneTrainCca => matches!(group, Group::Cca | Group::Encoder),
            FreezePolicy::FinetuneFfwReadout => matches!(group, Group::Ffw | Group::Readout),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::TrainAll => "train_all",
            FreezePolicy::FreezeBackboneTrainCca => "freeze_backbone_train_cca",
            FreezePolicy::FinetuneFfwReadout => "finetune_ffw_readout",
        }
    }
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_all" => Ok(FreezePolicy::TrainAll),
            "freeze_backbone_train_cca" => Ok(FreezePolicy::FreezeBackboneTrainCca),
            "finetune_ffw_readout" => Ok(FreezePolicy::FinetuneFfwReadout),
            _ => Err(Error::Config(format!("unknown freeze policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    // (bq, bk, bv, bo)
    bias: Option<[usize; 4]>,
}

#[derive(Debug, Clone, Copy)]
struct FfwIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1: LnIdx,
    attn: AttnIdx,
    cca: Option<(LnIdx, AttnIdx, usize)>,
    ln2: LnIdx,
    ffw: FfwIdx,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIdx {
    ln1: LnIdx,
    attn: AttnIdx,
    lnq: LnIdx,
    lnc: LnIdx,
    xattn: AttnIdx,
    ln2: LnIdx,
    ffw: FfwIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    layers: Vec<LayerIdx>,
    enc: Vec<EncLayerIdx>,
    enc_ln: Option<LnIdx>,
    ln_f: LnIdx,
    w_out: usize,
    b_out: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    out_std: f64,
}

impl Builder {
    fn add(&mut self, name: String, group: Group, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, group, shape, init });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, group: Group, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.g"), group, vec![d], Init::Ones),
            b: self.add(format!("{prefix}.b"), group, vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, group: Group, d: usize, bias: bool) -> AttnIdx {
        let std = Init::Normal(INIT_STD);
        let wq = self.add(format!("{prefix}.wq"), group, vec![d, d], std);
        let wk = self.add(format!("{prefix}.wk"), group, vec![d, d], std);
        let wv = self.add(format!("{prefix}.wv"), group, vec![d, d], std);
        let wo = self.add(format!("{prefix}.wo"), group, vec![d, d], Init::Normal(self.out_std));
        let bias = bias.then(|| {
            ["bq", "bk", "bv", "bo"].map(|b| self.add(format!("{prefix}.{b}"), group, vec![d], Init::Zeros))
        });
        AttnIdx { wq, wk, wv, wo, bias }
    }

    fn ffw(&mut self, prefix: &str, group: Group, d: usize, d_ff: usize) -> FfwIdx {
        FfwIdx {
            w1: self.add(format!("{prefix}.w1"), group, vec![d, d_ff], Init::Normal(INIT_STD)),
            b1: self.add(format!("{prefix}.b1"), group, vec![d_ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), group, vec![d_ff, d], Init::Normal(self.out_std)),
            b2: self.add(format!("{prefix}.b2"), group, vec![d], Init::Zeros),
        }
    }
}

fn layout(cfg: &ModelConfig, mode: ModelMode) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.d_model;
    let mut b = Builder {
        specs: Vec::new(),
        out_std: INIT_STD / (2.0 * cfg.n_layers as f64).sqrt(),
    };
    let tok_emb = b.add("tok_emb".into(), Group::Embedding, vec![cfg.vocab_size, d], Init::Normal(INIT_STD));
    let on = mode == ModelMode::On;
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("layer.{l}");
            let ln1 = b.ln(&format!("{p}.ln1"), Group::Attention, d);
            let attn = b.attn(&format!("{p}.attn"), Group::Attention, d, true);
            let cca = (on && cfg.has_cca(l)).then(|| {
                (
                    b.ln(&format!("{p}.cca.ln"), Group::Cca, d),
                    b.attn(&format!("{p}.cca"), Group::Cca, d, false),
                    // per-head bias over neighbor offset minus query offset
                    b.add(
                        format!("{p}.cca.rel"),
                        Group::Cca,
                        vec![cfg.n_heads, 3 * cfg.chunk_len - 1],
                        Init::Zeros,
                    ),
                )
            });
            let ln2 = b.ln(&format!("{p}.ln2"), Group::Ffw, d);
            let ffw = b.ffw(&format!("{p}.ffw"), Group::Ffw, d, cfg.d_ff);
            LayerIdx { ln1, attn, cca, ln2, ffw }
        })
        .collect();
    let (enc, enc_ln) = if on {
        let enc = (0..cfg.neighbor_encoder_layers)
            .map(|e| {
                let p = format!("enc.{e}");
                EncLayerIdx {
                    ln1: b.ln(&format!("{p}.ln1"), Group::Encoder, d),
                    attn: b.attn(&format!("{p}.attn"), Group::Encoder, d, true),
                    lnq: b.ln(&format!("{p}.lnq"), Group::Encoder, d),
                    lnc: b.ln(&format!("{p}.lnc"), Group::Encoder, d),
                    xattn: b.attn(&format!("{p}.xattn"), Group::Encoder, d, false),
                    ln2: b.ln(&format!("{p}.ln2"), Group::Encoder, d),
                    ffw: b.ffw(&format!("{p}.ffw"), Group::Encoder, d, cfg.d_ff),
                }
            })
            .collect();
        (enc, Some(b.ln("enc.ln_f", Group::Encoder, d)))
    } else {
        (Vec::new(), None)
    };
    let ln_f = b.ln("ln_f", Group::Readout, d);
    let w_out = b.add("w_out".into(), Group::Readout, vec![d, cfg.vocab_size], Init::Normal(INIT_STD));
    let b_out = b.add("b_out".into(), Group::Readout, vec![cfg.vocab_size], Init::Zeros);
    (
        Layout {
            tok_emb,
            layers,
            enc,
            enc_ln,
            ln_f,
            w_out,
            b_out,
        },
        b.specs,
    )
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, c| (h ^ u64::from(c)).wrapping_mul(0x0100_0000_01b3))
}

fn init_tensor(seed: u64, spec: &ParamSpec) -> Tensor<f32> {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(&spec.name));
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data)
}

/// Token blocks `[n_chunks, k, 2·chunk_len]` for one sequence, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTokens {
    pub n_chunks: usize,
    pub k: usize,
    pub width: usize,
    pub tokens: Vec<TokenId>,
    pub valid: Vec<bool>,
}

impl NeighborTokens {
    pub fn new(n_chunks: usize, k: usize, width: usize, tokens: Vec<TokenId>, valid: Vec<bool>) -> Result<Self> {
        let n = n_chunks * k * width;
        if tokens.len() != n || valid.len() != n {
            return Err(Error::Shape(format!(
                "neighbor block {n_chunks}x{k}x{width} needs {n} tokens, got {} tokens and {} mask entries",
                tokens.len(),
                valid.len()
            )));
        }
        Ok(Self {
            n_chunks,
            k,
            width,
            tokens,
            valid,
        })
    }

    /// The no-neighbors control: every slot holds the chunk's own tokens with a masked continuation.
    pub fn own_chunks(src: &[TokenId], chunk_len: usize, k: usize) -> Self {
        let n_chunks = src.len() / chunk_len;
        let width = 2 * chunk_len;
        let mut tokens = Vec::with_capacity(n_chunks * k * width);
        let mut valid = Vec::with_capacity(n_chunks * k * width);
        for chunk in src.chunks_exact(chunk_len) {
            for _ in 0..k {
                tokens.extend_from_slice(chunk);
                tokens.extend(std::iter::repeat_n(0, chunk_len));
                valid.extend(std::iter::repeat_n(true, chunk_len));
                valid.extend(std::iter::repeat_n(false, chunk_len));
            }
        }
        Self {
            n_chunks,
            k,
            width,
            tokens,
            valid,
        }
    }

    /// Tokens and mask of neighbor `j` of chunk `c`.
    pub fn record(&self, c: usize, j: usize) -> (&[TokenId], &[bool]) {
        let s = (c * self.k + j) * self.width;
        (&self.tokens[s..s + self.width], &self.valid[s..s + self.width])
    }
}

/// One sequence fed to the model.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub src: &'a [TokenId],
    pub neighbors: Option<&'a NeighborTokens>,
}

/// Embedding-noise hooks for one forward pass.
///
/// Each sequence `b` of the batch draws from its own stream, derived from
/// `(seed, stream, b, slot)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoisePlan {
    pub sequence: Option<Regularizer>,
    pub neighbors: Option<Regularizer>,
    pub seed: u64,
    pub stream: u64,
    /// Added to the batch index, so a sequence's draw does not depend on how it was batched.
    pub offset: u64,
}

impl NoisePlan {
    pub fn none() -> Self {
        Self::default()
    }
}

/// A recorded forward pass.
pub struct Forward<F> {
    pub graph: Graph<F>,
    /// `[batch, t, vocab]`
    pub logits: Var,
    /// One variable per model parameter, in model order.
    pub params: Vec<Var>,
}

impl<F: Float> Forward<F> {
    /// Weighted mean next-token cross-entropy; `weights` defaults to all ones.
    pub fn loss(&mut self, targets: &[TokenId], weights: Option<Vec<F>>) -> Var {
        let v = self.graph.value(self.logits).last_dim();
        let n = self.graph.value(self.logits).numel() / v;
        assert_eq!(targets.len(), n, "one target per position");
        let flat = self.graph.reshape(self.logits, vec![n, v]);
        let w = weights.unwrap_or_else(|| vec![F::one(); n]);
        let t = targets.iter().map(|&x| x as usize).collect();
        self.graph.cross_entropy(flat, Rc::new(t), Rc::new(w))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ParamCounts {
    pub per_group: BTreeMap<Group, usize>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    mode: ModelMode,
    layout: Layout,
    params: Vec<Param>,
    trainable: [bool; 6],
}

pub fn build_model(config: &ModelConfig, mode: ModelMode) -> Result<Model> {
    config.validate()?;
    let (layout, specs) = layout(config, mode);
    let params = specs
        .iter()
        .map(|s| Param {
            name: s.name.clone(),
            group: s.group,
            tensor: init_tensor(config.seed, s),
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        mode,
        layout,
        params,
        trainable: [true; 6],
    })
}

impl Model {
    /// Rebuilds a model from named tensors, checking names and shapes against the layout.
    pub fn from_named(config: &ModelConfig, mode: ModelMode, tensors: Vec<(String, Tensor<f32>)>) -> Result<Model> {
        config.validate()?;
        let (layout, specs) = layout(config, mode);
        if tensors.len() != specs.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", specs.len(), tensors.len())));
        }
        let params = specs
            .iter()
            .zip(tensors)
            .map(|(s, (name, t))| {
                if s.name != name || s.shape != t.shape {
                    return Err(Error::Shape(format!(
                        "tensor {name} {:?} does not match {} {:?}",
                        t.shape, s.name, s.shape
                    )));
                }
                if let Some(i) = t.data.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { index: i });
                }
                Ok(Param {
                    name,
                    group: s.group,
                    tensor: t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            config: config.clone(),
            mode,
            layout,
            params,
            trainable: [true; 6],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        for g in Group::ALL {
            self.trainable[g.index()] = policy.trains(g);
        }
    }

    pub fn set_group_trainable(&mut self, group: Group, trainable: bool) {
        self.trainable[group.index()] = trainable;
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable[group.index()]
    }

    /// Per-parameter trainable flags, in model order.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| self.is_trainable(p.group)).collect()
    }

    /// Copies every tensor whose name and shape also exist in `other` (e.g. an off-model backbone).
    pub fn load_matching(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(t) = other.param(&p.name) {
                if t.shape == p.tensor.shape {
                    p.tensor.data.copy_from_slice(&t.data);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn count_parameters(&self, group_filter: Option<&[Group]>) -> ParamCounts {
        let mut c = ParamCounts::default();
        for p in &self.params {
            if group_filter.is_some_and(|f| !f.contains(&p.group)) {
                continue;
            }
            let n = p.tensor.numel();
            *c.per_group.entry(p.group).or_insert(0) += n;
            c.total += n;
            if self.is_trainable(p.group) {
                c.trainable += n;
            } else {
                c.frozen += n;
            }
        }
        c
    }

    /// Parameters converted to another float type (for the f64 gradient check).
    pub fn params_as<F: Float>(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| p.tensor.cast()).collect()
    }

    /// Records a forward pass with the model's own f32 parameters.
    pub fn forward_graph(
        &self,
        inputs: &[SeqInput],
        mode: ForwardMode,
        noise: &NoisePlan,
        requires_grad: bool,
    ) -> Result<Forward<f32>> {
        let params: Vec<Tensor<f32>> = self.params.iter().map(|p| p.tensor.clone()).collect();
        let grad: Vec<bool> = if requires_grad {
            self.trainable_mask()
        } else {
            vec![false; params.len()]
        };
        self.forward_with(params, &grad, inputs, mode, noise)
    }

    /// Logits `[batch, t, vocab]` with no gradient bookkeeping.
    pub fn forward(&self, inputs: &[SeqInput], mode: ForwardMode, noise: &NoisePlan) -> Result<Tensor<f32>> {
        let f = self.forward_graph(inputs, mode, noise, false)?;
        Ok(f.graph.value(f.logits).clone())
    }

    /// Records a forward pass with externally supplied parameters of any float type.
    pub fn forward_with<F: Float>(
        &self,
        params: Vec<Tensor<F>>,
        requires_grad: &[bool],
        inputs: &[SeqInput],
        mode: ForwardMode,
        noise: &NoisePlan,
    ) -> Result<Forward<F>> {
        if params.len() != self.params.len() || requires_grad.len() != self.params.len() {
            return Err(Error::Shape("parameter list does not match the model".into()));
        }
        let mut graph = Graph::new();
        let pv: Vec<Var> = params
            .into_iter()
            .zip(requires_grad)
            .map(|(t, &rg)| graph.leaf(t, rg))
            .collect();
        let logits = Pass {
            cfg: &self.config,
            lay: &self.layout,
            model_mode: self.mode,
            g: &mut graph,
            pv: &pv,
        }
        .run(inputs, mode, noise)?;
        Ok(Forward {
            graph,
            logits,
            params: pv,
        })
    }
}

/// Graph construction state for one forward pass.
struct Pass<'a, F> {
    cfg: &'a ModelConfig,
    lay: &'a Layout,
    model_mode: ModelMode,
    g: &'a mut Graph<F>,
    pv: &'a [Var],
}

impl<F: Float> Pass<'_, F> {
    fn p(&self, i: usize) -> Var {
        self.pv[i]
    }

    fn run(&mut self, inputs: &[SeqInput], mode: ForwardMode, noise: &NoisePlan) -> Result<Var> {
        let cfg = self.cfg;
        let bsz = inputs.len();
        if bsz == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let t = inputs[0].src.len();
        if t == 0 || t % cfg.chunk_len != 0 || t > cfg.seq_len {
            return Err(Error::Shape(format!(
                "source length {t} must be a positive multiple of chunk_len {} up to seq_len {}",
                cfg.chunk_len, cfg.seq_len
            )));
        }
        for (i, s) in inputs.iter().enumerate() {
            if s.src.len() != t {
                return Err(Error::Shape(format!("sequence {i} has length {}, expected {t}", s.src.len())));
            }
            check_tokens(s.src, cfg.vocab_size)?;
        }
        let use_cca = match mode {
            ForwardMode::Off => false,
            ForwardMode::On | ForwardMode::NoNeighbors => {
                if self.model_mode != ModelMode::On {
                    return Err(Error::InvalidArgument("retrieval mode on a model built without CCA".into()));
                }
                true
            }
        };
        let n_chunks = t / cfg.chunk_len;
        let owned: Vec<NeighborTokens>;
        let neighbors: Vec<&NeighborTokens> = match mode {
            ForwardMode::Off => Vec::new(),
            ForwardMode::NoNeighbors => {
                owned = inputs
                    .iter()
                    .map(|s| NeighborTokens::own_chunks(s.src, cfg.chunk_len, cfg.k_neighbors))
                    .collect();
                owned.iter().collect()
            }
            ForwardMode::On => inputs
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n = s
                        .neighbors
                        .ok_or_else(|| Error::InvalidArgument(format!("sequence {i} has no neighbors in mode on")))?;
                    if (n.n_chunks, n.k, n.width) != (n_chunks, cfg.k_neighbors, 2 * cfg.chunk_len) {
                        return Err(Error::Shape(format!(
                            "neighbors {}x{}x{} for sequence {i}, expected {n_chunks}x{}x{}",
                            n.n_chunks,
                            n.k,
                            n.width,
                            cfg.k_neighbors,
                            2 * cfg.chunk_len
                        )));
                    }
                    check_tokens(&n.tokens, cfg.vocab_size)?;
                    Ok(n)
                })
                .collect::<Result<_>>()?,
        };

        let d = cfg.d_model;
        let idx: Vec<Option<usize>> = inputs.iter().flat_map(|s| s.src.iter().map(|&x| Some(x as usize))).collect();
        let mut x = self.g.gather_rows(self.p(self.lay.tok_emb), d, Rc::new(idx), vec![bsz, t, d]);
        if let Some(kind) = noise.sequence {
            x = self.add_noise(x, bsz, kind, noise, 0)?;
        }

        let rope_t = Rc::new(RopeTable::new(&(0..t).collect::<Vec<_>>(), cfg.head_dim(), ROPE_BASE));
        let causal = Rc::new(AttnMask::causal(1, t, bsz * cfg.n_heads));
        let mut encoded: Option<(Var, Vec<bool>)> = None;
        for l in 0..cfg.n_layers {
            let layer = self.lay.layers[l];
            if use_cca && encoded.is_none() && layer.cca.is_some() {
                encoded = Some(self.encode_neighbors(x, &neighbors, bsz, t, noise)?);
            }
            let h = self.ln(x, layer.ln1);
            let a = self.self_attention(h, layer.attn, bsz, t, &rope_t, &causal);
            x = self.g.add(x, a);
            if let (true, Some((ln, cca, rel)), Some((enc, valid))) = (use_cca, layer.cca, encoded.as_ref()) {
                let h = self.ln(x, ln);
                let c = self.chunked_cross_attention(h, cca, rel, *enc, valid, bsz, t);
                x = self.g.add(x, c);
            }
            let h = self.ln(x, layer.ln2);
            let f = self.ffw(h, layer.ffw);
            x = self.g.add(x, f);
        }
        let h = self.ln(x, self.lay.ln_f);
        Ok(self.g.linear(h, self.p(self.lay.w_out), Some(self.p(self.lay.b_out))))
    }

    /// Adds one fresh draw per sequence to `x: [bsz, ..]`, computing σ per sequence.
    fn add_noise(&mut self, x: Var, bsz: usize, kind: Regularizer, plan: &NoisePlan, slot: u64) -> Result<Var> {
        let v = self.g.value(x);
        let per = v.numel() / bsz;
        let rows = per / v.last_dim();
        let mut e = vec![F::zero(); v.numel()];
        let mut any = false;
        for b in 0..bsz {
            let m = &v.data[b * per..(b + 1) * per];
            let mut rng = derive_rng(plan.seed, stream_id(&[plan.stream, plan.offset + b as u64, slot]));
            if let Some(draw) = sample_noise(m, rows, kind, &mut rng)? {
                e[b * per..(b + 1) * per].copy_from_slice(&draw);
                any = true;
            }
        }
        if !any {
            return Ok(x);
        }
        let shape = v.shape.clone();
        let c = self.g.constant(Tensor::new(shape, e));
        Ok(self.g.add(x, c))
    }

    fn ln(&mut self, x: Var, i: LnIdx) -> Var {
        self.g.layer_norm(x, self.p(i.g), self.p(i.b))
    }

    fn proj(&mut self, x: Var, w: usize, b: Option<usize>) -> Var {
        let b = b.map(|b| self.p(b));
        self.g.linear(x, self.p(w), b)
    }

    fn ffw(&mut self, x: Var, i: FfwIdx) -> Var {
        let h = self.proj(x, i.w1, Some(i.b1));
        let h = self.g.gelu(h);
        self.proj(h, i.w2, Some(i.b2))
    }

    /// `[n, t, d] -> [n·heads, t, dh]`
    fn split_heads(&mut self, x: Var, n: usize, t: usize) -> Var {
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let r = self.g.reshape(x, vec![n, t, h, dh]);
        let s = self.g.swap12(r, [n, t, h, dh]);
        self.g.reshape(s, vec![n * h, t, dh])
    }

    /// `[n·heads, t, dh] -> [n, t, d]`
    fn merge_heads(&mut self, x: Var, n: usize, t: usize) -> Var {
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let r = self.g.reshape(x, vec![n, h, t, dh]);
        let s = self.g.swap12(r, [n, h, t, dh]);
        self.g.reshape(s, vec![n, t, h * dh])
    }

    fn attend(&mut self, q: Var, k: Var, v: Var, mask: Rc<AttnMask>) -> Var {
        let scale = F::from_f64c(1.0 / (self.cfg.head_dim() as f64).sqrt());
        let s = self.g.bmm(q, k, true);
        let s = self.g.scale(s, scale);
        let p = self.g.masked_softmax(s, mask);
        self.g.bmm(p, v, false)
    }

    fn bias(i: AttnIdx, which: usize) -> Option<usize> {
        i.bias.map(|b| b[which])
    }

    /// Rotary multi-head attention of `x: [n, t, d]` over itself.
    fn self_attention(&mut self, x: Var, i: AttnIdx, n: usize, t: usize, rope: &Rc<RopeTable<F>>, mask: &Rc<AttnMask>) -> Var {
        let q = self.proj(x, i.wq, Self::bias(i, 0));
        let k = self.proj(x, i.wk, Self::bias(i, 1));
        let v = self.proj(x, i.wv, Self::bias(i, 2));
        let q = self.split_heads(q, n, t);
        let k = self.split_heads(k, n, t);
        let v = self.split_heads(v, n, t);
        let q = self.g.rope(q, rope.clone());
        let k = self.g.rope(k, rope.clone());
        let o = self.attend(q, k, v, mask.clone());
        let o = self.merge_heads(o, n, t);
        self.proj(o, i.wo, Self::bias(i, 3))
    }

    /// Encodes all neighbor blocks once. Returns `[bsz·n_chunks, k·width, d]` and the key mask.
    fn encode_neighbors(
        &mut self,
        hidden: Var,
        neighbors: &[&NeighborTokens],
        bsz: usize,
        t: usize,
        noise: &NoisePlan,
    ) -> Result<(Var, Vec<bool>)> {
        let cfg = self.cfg;
        let (d, l, k) = (cfg.d_model, cfg.chunk_len, cfg.k_neighbors);
        let n_chunks = t / l;
        let w = 2 * l;
        let n = bsz * n_chunks * k;
        let mut idx = Vec::with_capacity(n * w);
        let mut valid = Vec::with_capacity(n * w);
        for nb in neighbors {
            for (&tok, &ok) in nb.tokens.iter().zip(&nb.valid) {
                idx.push(ok.then_some(tok as usize));
                valid.push(ok);
            }
        }
        let mut y = self.g.gather_rows(self.p(self.lay.tok_emb), d, Rc::new(idx), vec![n, w, d]);
        if let Some(kind) = noise.neighbors {
            y = self.add_noise(y, bsz, kind, noise, 1)?;
        }
        let rope_w = Rc::new(RopeTable::new(&(0..w).collect::<Vec<_>>(), cfg.head_dim(), ROPE_BASE));
        let self_mask = Rc::new(AttnMask::from_keys(&valid, w, w, cfg.n_heads));
        let cross_mask = Rc::new(AttnMask::from_keys(&vec![true; l], w, l, n * cfg.n_heads));
        // each neighbor row r belongs to chunk r / k
        let repeat: Rc<Vec<Option<usize>>> = Rc::new((0..n).map(|r| Some(r / k)).collect());
        for e in 0..self.lay.enc.len() {
            let layer = self.lay.enc[e];
            let h = self.ln(y, layer.ln1);
            let a = self.self_attention(h, layer.attn, n, w, &rope_w, &self_mask);
            y = self.g.add(y, a);

            let c = self.ln(hidden, layer.lnc);
            let ck = self.proj(c, layer.xattn.wk, None);
            let cv = self.proj(c, layer.xattn.wv, None);
            let ck = self.g.gather_rows(ck, l * d, repeat.clone(), vec![n, l, d]);
            let cv = self.g.gather_rows(cv, l * d, repeat.clone(), vec![n, l, d]);
            let h = self.ln(y, layer.lnq);
            let q = self.proj(h, layer.xattn.wq, None);
            let q = self.split_heads(q, n, w);
            let ck = self.split_heads(ck, n, l);
            let cv = self.split_heads(cv, n, l);
            let o = self.attend(q, ck, cv, cross_mask.clone());
            let o = self.merge_heads(o, n, w);
            let o = self.proj(o, layer.xattn.wo, None);
            y = self.g.add(y, o);

            let h = self.ln(y, layer.ln2);
            let f = self.ffw(h, layer.ffw);
            y = self.g.add(y, f);
        }
        let y = self.ln(y, self.lay.enc_ln.expect("on-model has an encoder norm"));
        let y = self.g.reshape(y, vec![bsz * n_chunks, k * w, d]);
        Ok((y, valid))
    }

    /// Chunk `i` of `x: [bsz, t, d]` attends to the encoded neighbors of chunk `i - 1`.
    #[allow(clippy::too_many_arguments)]
    fn chunked_cross_attention(&mut self, x: Var, i: AttnIdx, rel: usize, enc: Var, valid: &[bool], bsz: usize, t: usize) -> Var {
        let cfg = self.cfg;
        let (d, l) = (cfg.d_model, cfg.chunk_len);
        let n_chunks = t / l;
        let kw = cfg.k_neighbors * 2 * l;
        let rows = bsz * n_chunks;
        let shift: Vec<Option<usize>> = (0..rows)
            .map(|r| (r % n_chunks > 0).then(|| r - 1))
            .collect();
        let mut key_ok = Vec::with_capacity(rows * kw);
        for r in 0..rows {
            if r % n_chunks == 0 {
                key_ok.extend(std::iter::repeat_n(false, kw));
            } else {
                key_ok.extend_from_slice(&valid[(r - 1) * kw..r * kw]);
            }
        }
        let mask = Rc::new(AttnMask::from_keys(&key_ok, l, kw, cfg.n_heads));
        let mem = self.g.gather_rows(enc, kw * d, Rc::new(shift), vec![rows, kw, d]);
        let q = self.proj(x, i.wq, None);
        let q = self.g.reshape(q, vec![rows, l, d]);
        let k = self.proj(mem, i.wk, None);
        let v = self.proj(mem, i.wv, None);
        let q = self.split_heads(q, rows, l);
        let k = self.split_heads(k, rows, kw);
        let v = self.split_heads(v, rows, kw);
        // relative positions: offset within the chunk against offset within each neighbor
        let w = 2 * l;
        let rope_q = Rc::new(RopeTable::new(&(0..l).collect::<Vec<_>>(), cfg.head_dim(), ROPE_BASE));
        let rope_k = Rc::new(RopeTable::new(&(0..kw).map(|p| p % w).collect::<Vec<_>>(), cfg.head_dim(), ROPE_BASE));
        let q = self.g.rope(q, rope_q);
        let k = self.g.rope(k, rope_k);
        let h = cfg.n_heads;
        let n_rel = 3 * l - 1;
        let rel_idx: Vec<Option<usize>> = (0..h)
            .flat_map(|hd| (0..l).flat_map(move |qi| (0..kw).map(move |kj| Some(hd * n_rel + kj % w + l - 1 - qi))))
            .collect();
        let bias = self.g.gather_rows(self.p(rel), 1, Rc::new(rel_idx), vec![h * l * kw]);
        let scale = F::from_f64c(1.0 / (cfg.head_dim() as f64).sqrt());
        let s = self.g.bmm(q, k, true);
        let s = self.g.scale(s, scale);
        let s = self.g.reshape(s, vec![rows, h * l * kw]);
        let s = self.g.add_bias(s, bias);
        let s = self.g.reshape(s, vec![rows * h, l, kw]);
        let p = self.g.masked_softmax(s, mask);
        let o = self.g.bmm(p, v, false);
        let o = self.merge_heads(o, rows, l);
        let o = self.proj(o, i.wo, None);
        self.g.reshape(o, vec![bsz, t, d])
    }
}

fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    match tokens.iter().position(|&x| x as usize >= vocab_size) {
        Some(p) => Err(Error::TokenOutOfRange {
            position: p,
            id: tokens[p],
            vocab_size: vocab_size as u32,
        }),
        None => Ok(()),
    }
}
