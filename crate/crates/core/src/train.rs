//! Training loop: batching, regularizer hooks, freezing, checkpoints, resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::corpus::{make_samples, SequenceSample, TokenId, TokenSequence};
use crate::embed::EmbedderSpec;
use crate::eval::{plug_and_play_eval, EvalMode, NeighborSource, PreparedDomain};
use crate::error::{Error, Result};
use crate::model::{
    build_model, FreezePolicy, ForwardMode, Model, ModelMode, NeighborTokens, NoisePlan, SeqInput,
};
use crate::noise::{derive_rng, stream_id, RegularizerSpec};
use crate::optim::{clip_global_norm, lr_at, Optimizer, OptimizerKind};
use crate::retrodb::{precompute_neighbors, NeighborStore, StoreRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub warmup: usize,
    /// Linear decay to zero after warmup.
    pub lr_decay: bool,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub regularizer: RegularizerSpec,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Probability that a sequence trains with the no-neighbors control instead of its retrieved neighbors.
    pub neighbor_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 2,
            lr: 1e-3,
            optimizer: OptimizerKind::Radam,
            warmup: 0,
            lr_decay: false,
            seed: 0,
            freeze_policy: FreezePolicy::TrainAll,
            regularizer: RegularizerSpec::none(),
            grad_clip: 1.0,
            weight_decay: 0.0,
            checkpoint_every: 0,
            neighbor_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.neighbor_dropout) {
            return Err(Error::Config("neighbor_dropout must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and grad_clip must be > 0, weight_decay >= 0".into()));
        }
        self.regularizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Sample indices for `step`: a fixed permutation per epoch, drawn from `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + i;
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut derive_rng(seed, stream_id(&[0xba7c, epoch])));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

/// Neighbor blocks for the records, or `None` for an off-model.
fn neighbor_blocks(model: &Model, records: &[&StoreRecord], cfg: &TrainConfig, step: u64) -> Option<Vec<NeighborTokens>> {
    let mc = model.config();
    (model.mode() == ModelMode::On).then(|| {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let drop = cfg.neighbor_dropout > 0.0
                    && derive_rng(cfg.seed, stream_id(&[0xd0d0, step, i as u64])).random_bool(cfg.neighbor_dropout);
                if drop {
                    NeighborTokens::own_chunks(&r.src, mc.chunk_len, mc.k_neighbors)
                } else {
                    r.neighbors.to_tokens()
                }
            })
            .collect()
    })
}

/// One optimizer step over `records`; the noise stream is keyed by `step`.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    records: &[&StoreRecord],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    let blocks = neighbor_blocks(model, records, cfg, step);
    let inputs: Vec<SeqInput> = records
        .iter()
        .enumerate()
        .map(|(i, r)| SeqInput {
            src: &r.src,
            neighbors: blocks.as_ref().map(|b| &b[i]),
        })
        .collect();
    let mode = match model.mode() {
        ModelMode::Off => ForwardMode::Off,
        ModelMode::On => ForwardMode::On,
    };
    let plan = NoisePlan {
        sequence: cfg.regularizer.on_sequence(),
        neighbors: cfg.regularizer.on_neighbors(),
        seed: cfg.seed,
        stream: step,
        offset: 0,
    };
    let targets: Vec<TokenId> = records.iter().flat_map(|r| r.tgt.iter().copied()).collect();
    let lr = lr_at(step as usize, cfg.lr, cfg.warmup, cfg.steps, cfg.lr_decay);

    let mut fwd = model.forward_graph(&inputs, mode, &plan, true)?;
    let loss_var = fwd.loss(&targets, None);
    let loss = f64::from(fwd.graph.value(loss_var).data[0]);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            lr,
            grad_norm: f64::NAN,
        });
    }
    let mut grads = fwd.graph.backward(loss_var);
    let mask = model.trainable_mask();
    let mut slots: Vec<(usize, Vec<f32>)> = fwd
        .params
        .iter()
        .enumerate()
        .filter(|(i, _)| mask[*i])
        .map(|(i, &v)| {
            let n = model.params()[i].tensor.numel();
            (i, grads.take(v).unwrap_or_else(|| vec![0.0; n]))
        })
        .collect();
    let grad_norm = {
        let mut views: Vec<&mut [f32]> = slots.iter_mut().map(|(_, g)| g.as_mut_slice()).collect();
        clip_global_norm(&mut views, cfg.grad_clip)
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step, lr, grad_norm });
    }
    opt.begin_step();
    let params = model.params_mut();
    for (i, g) in &slots {
        opt.update(*i, &mut params[*i].tensor.data, g, lr);
    }
    Ok(StepStats {
        step,
        loss,
        grad_norm,
        lr,
    })
}

#[derive(Debug, Default)]
pub struct LoopOptions<'a> {
    /// Checkpoints and `loss.csv` go here when set.
    pub out_dir: Option<&'a Path>,
    /// Continue from this checkpoint (model, optimizer and step).
    pub resume: Option<&'a Path>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Optimizer,
    pub history: Vec<StepStats>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:07}.bin")
}

/// Runs `cfg.steps` steps (minus any already done by the resumed checkpoint).
///
/// A resumed run reaches bit-identical parameters to an uninterrupted one:
/// batch order and noise draws depend only on the seed and the step index.
pub fn train_loop(mut model: Model, store: &NeighborStore, cfg: &TrainConfig, opts: LoopOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::Empty);
    }
    let mc = model.config();
    if store.seq_len != mc.seq_len || store.chunk_len != mc.chunk_len || store.vocab_size as usize != mc.vocab_size {
        return Err(Error::Config(format!(
            "store (seq {}, chunk {}, vocab {}) does not match the model (seq {}, chunk {}, vocab {})",
            store.seq_len, store.chunk_len, store.vocab_size, mc.seq_len, mc.chunk_len, mc.vocab_size
        )));
    }
    if model.mode() == ModelMode::On && store.k != mc.k_neighbors {
        return Err(Error::Config(format!("store has k={}, model expects {}", store.k, mc.k_neighbors)));
    }
    let mut start = 0u64;
    let mut opt = Optimizer::new(cfg.optimizer, model.params().len(), cfg.weight_decay);
    if let Some(path) = opts.resume {
        let ck = load_checkpoint(path, Some(model.config()))?;
        model = ck.to_model()?;
        start = ck.step;
        if let Some(o) = ck.optimizer {
            opt = o;
        }
    }
    model.set_freeze_policy(cfg.freeze_policy);

    let mut csv = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let fresh = start == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step,loss,grad_norm,lr").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    for step in start..cfg.steps as u64 {
        let idx = batch_indices(store.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&StoreRecord> = idx.iter().map(|&i| &store.records[i]).collect();
        let stats = train_step(&mut model, &mut opt, &batch, cfg, step)?;
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{},{},{},{}", stats.step, stats.loss, stats.grad_norm, stats.lr)
                .map_err(|e| Error::io(&*path, e))?;
        }
        history.push(stats);
        let done = step + 1;
        if let Some(dir) = opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 || done == cfg.steps as u64 {
                let path = dir.join(checkpoint_name(done));
                save_checkpoint(&path, &Checkpoint::from_model(&model, done, cfg.seed, Some(&opt)))?;
                checkpoints.push(path);
            }
        }
        if done % 100 == 0 {
            log::debug!("step {done}: loss {:.4}", stats.loss);
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        history,
        checkpoints,
    })
}

/// Phase 2: an on-model sharing every backbone tensor of `off`, with only CCA and encoder trainable.
pub fn retrofit(off: &Model) -> Result<Model> {
    let mut on = build_model(off.config(), ModelMode::On)?;
    on.load_matching(off);
    on.set_freeze_policy(FreezePolicy::FreezeBackboneTrainCca);
    Ok(on)
}

/// Fraction of the domain's training samples used as fine-tuning inputs.
pub const FINETUNE_FRACTION: f64 = 0.15;

/// Which domain training samples feed fine-tuning; the rest build the retrieval DB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSplit {
    pub seed: u64,
    pub n_samples: usize,
    /// Sorted sample indices used as fine-tuning inputs.
    pub finetune: Vec<usize>,
}

impl FinetuneSplit {
    pub fn draw(n_samples: usize, seed: u64) -> Result<Self> {
        let n_ft = (n_samples as f64 * FINETUNE_FRACTION).round() as usize;
        if n_ft == 0 || n_ft == n_samples {
            return Err(Error::CorpusTooSmall(format!(
                "{n_samples} domain samples cannot be split 15/85 with both parts non-empty"
            )));
        }
        let mut idx: Vec<usize> = (0..n_samples).collect();
        idx.shuffle(&mut derive_rng(seed, stream_id(&[0xf175])));
        let mut finetune = idx[..n_ft].to_vec();
        finetune.sort_unstable();
        Ok(Self {
            seed,
            n_samples,
            finetune,
        })
    }

    /// Reads `split.json` from `dir` if present, otherwise draws and writes it.
    pub fn load_or_draw(dir: &Path, n_samples: usize, seed: u64) -> Result<Self> {
        let path = dir.join("split.json");
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let split: Self = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if split.n_samples != n_samples || split.seed != seed {
                return Err(Error::Config(format!(
                    "{} was drawn for {} samples with seed {}, now {} samples with seed {}",
                    path.display(),
                    split.n_samples,
                    split.seed,
                    n_samples,
                    seed
                )));
            }
            return Ok(split);
        }
        let split = Self::draw(n_samples, seed)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&split).expect("split serializes");
        crate::codec::write_atomic(&path, json.as_bytes())?;
        Ok(split)
    }
}

/// Validation perplexity after each epoch; entry 0 is before any update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub dataset: String,
    pub retrieval: ModelMode,
    pub perplexities: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub split: FinetuneSplit,
    pub report: FinetuneReport,
    pub checkpoints: Vec<PathBuf>,
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:02}.bin")
}

/// Fine-tunes only the feed-forward and read-out tensors on 15% of a domain's
/// training samples, retrieving from a DB built on the other 85%.
///
/// `cfg.steps` and `cfg.freeze_policy` are ignored: every epoch is one pass
/// over the fine-tuning samples.
pub fn finetune_domain(
    mut model: Model,
    name: &str,
    train_docs: &[TokenSequence],
    valid: Vec<TokenSequence>,
    embedder: EmbedderSpec,
    cfg: &TrainConfig,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let mc = model.config().clone();
    let samples: Vec<SequenceSample> = train_docs
        .iter()
        .flat_map(|d| make_samples(d, mc.seq_len).samples)
        .collect();
    if samples.is_empty() {
        return Err(Error::CorpusTooSmall(format!(
            "domain '{name}' has no training document longer than seq_len={}",
            mc.seq_len
        )));
    }
    let split = match out_dir {
        Some(dir) => FinetuneSplit::load_or_draw(dir, samples.len(), cfg.seed)?,
        None => FinetuneSplit::draw(samples.len(), cfg.seed)?,
    };
    let mut is_ft = vec![false; samples.len()];
    for &i in &split.finetune {
        is_ft[i] = true;
    }
    let (ft, rest): (Vec<_>, Vec<_>) = samples.into_iter().zip(is_ft).partition(|(_, f)| *f);
    let ft: Vec<SequenceSample> = ft.into_iter().map(|(s, _)| s).collect();
    let db_docs: Vec<TokenSequence> = rest.into_iter().map(|(s, _)| s.src).collect();
    let domain = PreparedDomain::build(name, &db_docs, valid, mc.chunk_len, mc.vocab_size as u32, embedder, cfg.seed)?;
    let store = match domain.source(mc.k_neighbors) {
        NeighborSource::Retrieval {
            db,
            index,
            embedder,
            params,
        } => precompute_neighbors(db, index, embedder, &ft, params)?,
        NeighborSource::None => unreachable!("a prepared domain always retrieves"),
    };

    let eval_mode = match model.mode() {
        ModelMode::Off => EvalMode::Off,
        ModelMode::On => EvalMode::OnIdeal,
    };
    let reg = cfg.regularizer.label();
    let eval = |m: &Model| plug_and_play_eval(m, &domain, eval_mode, cfg.seed, &reg).map(|r| r.perplexity);

    let per_epoch = store.len().div_ceil(cfg.batch_size);
    let run = TrainConfig {
        steps: (per_epoch * epochs).max(1),
        freeze_policy: FreezePolicy::FinetuneFfwReadout,
        ..cfg.clone()
    };
    run.validate()?;
    model.set_freeze_policy(run.freeze_policy);
    let mut opt = Optimizer::new(run.optimizer, model.params().len(), run.weight_decay);
    let mut perplexities = vec![eval(&model)?];
    let mut checkpoints = Vec::new();
    for epoch in 1..=epochs {
        for step in ((epoch - 1) * per_epoch) as u64..(epoch * per_epoch) as u64 {
            let idx = batch_indices(store.len(), run.batch_size, run.seed, step);
            let batch: Vec<&StoreRecord> = idx.iter().map(|&i| &store.records[i]).collect();
            train_step(&mut model, &mut opt, &batch, &run, step)?;
        }
        perplexities.push(eval(&model)?);
        if let Some(dir) = out_dir {
            let path = dir.join(epoch_checkpoint_name(epoch));
            let step = (epoch * per_epoch) as u64;
            save_checkpoint(&path, &Checkpoint::from_model(&model, step, run.seed, Some(&opt)))?;
            checkpoints.push(path);
        }
        log::info!("{name} epoch {epoch}: perplexity {:.4}", perplexities[epoch]);
    }
    let best_epoch = perplexities
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(FinetuneOutcome {
        report: FinetuneReport {
            dataset: name.to_string(),
            retrieval: model.mode(),
            perplexities,
            best_epoch,
        },
        model,
        split,
        checkpoints,
    })
}

/// One row per (dataset, retrieval) with epoch columns; the best epoch is starred.
pub fn finetune_table(reports: &[FinetuneReport]) -> String {
    let epochs = reports.iter().map(|r| r.perplexities.len()).max().unwrap_or(0);
    let mut s = String::from("dataset,retrieval");
    for e in 0..epochs {
        s.push_str(&format!(",{e}"));
    }
    s.push('\n');
    for r in reports {
        let mode = match r.retrieval {
            ModelMode::Off => "off",
            ModelMode::On => "on",
        };
        s.push_str(&format!("{},{mode}", r.dataset));
        for e in 0..epochs {
            match r.perplexities.get(e) {
                Some(p) if e == r.best_epoch => s.push_str(&format!(",*{p:.2}")),
                Some(p) => s.push_str(&format!(",{p:.2}")),
                None => s.push_str(",—"),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelConfig};
    use crate::noise::Placement;
    use crate::retrodb::{NeighborRecord, NeighborSet};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 13,
            seq_len: 8,
            chunk_len: 4,
            k_neighbors: 2,
            cca_layers: vec![2],
            d_emb: 16,
            neighbor_encoder_layers: 1,
            seed: 5,
        }
    }

    fn store(cfg: &ModelConfig, seqs: &[Vec<TokenId>]) -> NeighborStore {
        let l = cfg.chunk_len;
        let records = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = cfg.seq_len;
                let recs = (0..t / l * cfg.k_neighbors)
                    .map(|j| NeighborRecord {
                        tokens: (0..2 * l).map(|x| ((x + j + i) % cfg.vocab_size) as TokenId).collect(),
                        valid: vec![true; 2 * l],
                        distance: 0.0,
                        source: Some(j as u64),
                    })
                    .collect();
                StoreRecord {
                    src: s[..t].to_vec(),
                    tgt: s[1..=t].to_vec(),
                    offset: (i * t) as u64,
                    neighbors: NeighborSet {
                        n_chunks: t / l,
                        k: cfg.k_neighbors,
                        chunk_len: l,
                        records: recs,
                        repeated: vec![false; t / l],
                    },
                }
            })
            .collect();
        NeighborStore {
            seq_len: cfg.seq_len,
            chunk_len: l,
            k: cfg.k_neighbors,
            vocab_size: cfg.vocab_size as u32,
            records,
        }
    }

    fn overfit_store(cfg: &ModelConfig) -> NeighborStore {
        let a: Vec<TokenId> = vec![1, 5, 2, 9, 4, 4, 7, 11, 3];
        let b: Vec<TokenId> = vec![12, 0, 6, 6, 8, 10, 1, 2, 5];
        store(cfg, &[a, b])
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let cfg = tiny_cfg();
        let mut m = build_model(&cfg, ModelMode::Off).unwrap();
        for name in ["w_out", "b_out"] {
            m.param_mut(name).unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        }
        let st = overfit_store(&cfg);
        let mut opt = Optimizer::new(OptimizerKind::Radam, m.params().len(), 0.0);
        let batch: Vec<&StoreRecord> = st.records.iter().collect();
        let s = train_step(&mut m, &mut opt, &batch, &TrainConfig::default(), 0).unwrap();
        assert!((s.loss - (13f64).ln()).abs() < 1e-3, "{}", s.loss);
    }

    #[test]
    fn overfits_two_sequences() {
        let cfg = tiny_cfg();
        let st = overfit_store(&cfg);
        let tc = TrainConfig {
            steps: 2000,
            ..TrainConfig::default()
        };
        let out = train_loop(build_model(&cfg, ModelMode::Off).unwrap(), &st, &tc, LoopOptions::default()).unwrap();
        let first_below = out.history.iter().position(|s| s.loss < 0.1);
        assert!(first_below.is_some(), "final loss {}", out.history.last().unwrap().loss);
        assert!(out.history.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn deterministic_and_resumable() {
        let cfg = tiny_cfg();
        let st = overfit_store(&cfg);
        let tc = TrainConfig {
            steps: 20,
            checkpoint_every: 10,
            regularizer: RegularizerSpec::gaussian(0.2, Placement::Both),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        let m = || build_model(&cfg, ModelMode::On).unwrap();
        let a = train_loop(m(), &st, &tc, LoopOptions { out_dir: Some(&d1), resume: None }).unwrap();
        let b = train_loop(m(), &st, &tc, LoopOptions { out_dir: Some(&d2), resume: None }).unwrap();
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&d1.join(checkpoint_name(20))), read(&d2.join(checkpoint_name(20))));
        assert_eq!(a.history, b.history);

        let d3 = dir.path().join("c");
        let resumed = train_loop(
            m(),
            &st,
            &tc,
            LoopOptions {
                out_dir: Some(&d3),
                resume: Some(&d1.join(checkpoint_name(10))),
            },
        )
        .unwrap();
        assert_eq!(resumed.history.len(), 10);
        assert_eq!(read(&d1.join(checkpoint_name(20))), read(&d3.join(checkpoint_name(20))));
        let csv = std::fs::read_to_string(d1.join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 21);
        assert!(csv.starts_with("step,loss,grad_norm,lr\n0,"));
    }

    #[test]
    fn resume_rejects_other_config() {
        let cfg = tiny_cfg();
        let st = overfit_store(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig { steps: 2, ..TrainConfig::default() };
        train_loop(build_model(&cfg, ModelMode::Off).unwrap(), &st, &tc, LoopOptions { out_dir: Some(dir.path()), resume: None }).unwrap();
        let mut other = cfg.clone();
        other.d_ff = 64;
        let e = train_loop(
            build_model(&other, ModelMode::Off).unwrap(),
            &st,
            &tc,
            LoopOptions { out_dir: None, resume: Some(&dir.path().join(checkpoint_name(2))) },
        )
        .unwrap_err();
        assert_eq!(e.code(), "E_CONFIG_HASH");
    }

    #[test]
    fn retrofit_trains_only_cca_and_encoder() {
        let cfg = tiny_cfg();
        let st = overfit_store(&cfg);
        let off = build_model(&cfg, ModelMode::Off).unwrap();
        let on = retrofit(&off).unwrap();
        let tc = TrainConfig {
            steps: 30,
            freeze_policy: FreezePolicy::FreezeBackboneTrainCca,
            ..TrainConfig::default()
        };
        let out = train_loop(on.clone(), &st, &tc, LoopOptions::default()).unwrap();
        for (before, after) in on.params().iter().zip(out.model.params()) {
            let same = before.tensor.data == after.tensor.data;
            let trained = matches!(before.group, Group::Cca | Group::Encoder);
            assert_eq!(same, !trained, "{}", before.name);
        }
        for p in off.params() {
            assert_eq!(on.param(&p.name).unwrap().data, p.tensor.data);
        }
    }

    #[test]
    fn batch_order_is_a_permutation_per_epoch() {
        let n = 7;
        let mut seen: Vec<usize> = (0..7).flat_map(|s| batch_indices(n, 2, 3, s)).collect();
        seen.truncate(7);
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(batch_indices(n, 2, 3, 5), batch_indices(n, 2, 3, 5));
        assert_ne!(
            (0..4).flat_map(|s| batch_indices(n, 2, 3, s)).collect::<Vec<_>>(),
            (0..4).flat_map(|s| batch_indices(n, 2, 4, s)).collect::<Vec<_>>()
        );
    }

    fn domain_docs(n: usize, len: usize, salt: u64) -> Vec<TokenSequence> {
        let mut rng = derive_rng(salt, stream_id(&[1]));
        let mut start = 0;
        (0..n)
            .map(|d| {
                let t: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..13)).collect();
                let s = TokenSequence::with_origin(t, d as u32, start);
                start += len;
                s
            })
            .collect()
    }

    #[test]
    fn finetune_updates_only_ffw_and_readout() {
        let cfg = tiny_cfg();
        let m0 = build_model(&cfg, ModelMode::On).unwrap();
        let train = domain_docs(4, 40, 1);
        let valid = domain_docs(2, 30, 2);
        let spec = EmbedderSpec::hash(16, 1);
        let tc = TrainConfig {
            seed: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = finetune_domain(m0.clone(), "toy", &train, valid.clone(), spec, &tc, 2, Some(dir.path())).unwrap();
        assert_eq!(out.split.n_samples, 16);
        assert_eq!(out.split.finetune.len(), 2);
        assert_eq!(out.report.perplexities.len(), 3);
        assert_eq!(out.checkpoints.len(), 2);

        // epoch 0 is plug-and-play on the 85% database
        let mut rest = Vec::new();
        let mut k = 0;
        for d in &train {
            for s in make_samples(d, cfg.seq_len).samples {
                if !out.split.finetune.contains(&k) {
                    rest.push(s.src);
                }
                k += 1;
            }
        }
        let dom = PreparedDomain::build("toy", &rest, valid.clone(), cfg.chunk_len, 13, spec, tc.seed).unwrap();
        let pnp = plug_and_play_eval(&m0, &dom, EvalMode::OnIdeal, tc.seed, "none").unwrap();
        assert_eq!(out.report.perplexities[0], pnp.perplexity);

        for (a, b) in m0.params().iter().zip(out.model.params()) {
            let trained = matches!(a.group, Group::Ffw | Group::Readout);
            if !trained {
                assert_eq!(a.tensor, b.tensor, "{} changed", a.name);
            }
        }
        assert!(m0
            .params()
            .iter()
            .zip(out.model.params())
            .any(|(a, b)| a.group == Group::Ffw && a.tensor != b.tensor));

        // the persisted split is reused
        let again = finetune_domain(m0, "toy", &train, valid, spec, &tc, 1, Some(dir.path())).unwrap();
        assert_eq!(again.split, out.split);
        assert_eq!(again.report.perplexities[..], out.report.perplexities[..2]);
    }

    #[test]
    fn finetune_rejects_small_domains() {
        let cfg = tiny_cfg();
        let m = build_model(&cfg, ModelMode::Off).unwrap();
        let spec = EmbedderSpec::hash(16, 1);
        let tiny = domain_docs(1, 6, 1);
        let e = finetune_domain(m.clone(), "t", &tiny, domain_docs(1, 20, 2), spec, &TrainConfig::default(), 1, None);
        assert_eq!(e.unwrap_err().code(), "E_CORPUS");
        let three = domain_docs(1, 25, 1);
        let e = finetune_domain(m, "t", &three, domain_docs(1, 20, 2), spec, &TrainConfig::default(), 1, None);
        assert_eq!(e.unwrap_err().code(), "E_CORPUS");
    }

    #[test]
    fn finetune_table_marks_best_epoch() {
        let r = FinetuneReport {
            dataset: "law".into(),
            retrieval: ModelMode::On,
            perplexities: vec![30.0, 25.5, 26.0],
            best_epoch: 1,
        };
        let t = finetune_table(&[r]);
        assert_eq!(t, "dataset,retrieval,0,1,2\nlaw,on,30.00,*25.50,26.00\n");
    }
}
