use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use retrolite::checkpoint::load_checkpoint;
use retrolite::config::{KvConfig, RunConfig};
use retrolite::corpus::{make_samples, save_token_stream, load_token_stream, ByteTokenizer, Corpus, TokenSequence, Tokenizer};
use retrolite::embed::{save_embedding_table, EmbedderSpec};
use retrolite::eval::{
    generate, noisy_retrieval_sweep, plug_and_play_eval, semantic_similarity, sweep_csv, EvalContext, EvalMode,
    EvalReport, NeighborSource, PreparedDomain, Sampling, DEFAULT_LAMBDAS,
};
use retrolite::ivf::{decode_index, default_index_params, encode_index};
use retrolite::model::{build_model, Model, ModelMode};
use retrolite::retrodb::{
    build_db, corpus_documents, leakage_report, load_db, load_store, precompute_neighbors, save_db, save_store,
    RetrievalParams,
};
use retrolite::train::{finetune_domain, finetune_table, train_loop, LoopOptions};

mod report;
mod run;

use run::RunDir;

/// A failure reported as one `error[CODE]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub msg: String,
}

impl CliError {
    pub fn new(code: &str, msg: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("E_IO", format!("{}: {e}", path.display()))
    }
}

impl From<retrolite::error::Error> for CliError {
    fn from(e: retrolite::error::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "retrolite", version, about = "Small-scale retrieval-augmented language modeling")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set model.n_layers=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; without it the config's `seed`, then RETROLITE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk a corpus, embed the chunks and index them.
    BuildDb(BuildDbArgs),
    /// Retrieve neighbors for every training sample of a built database's corpus.
    Precompute(PrecomputeArgs),
    /// Train a model on a precomputed neighbor store.
    Train(TrainArgs),
    /// Fine-tune feed-forward and read-out layers on a domain.
    Finetune(FinetuneArgs),
    /// Evaluate one mode on a domain.
    Eval(EvalArgs),
    /// The four-mode grid on one or more domains.
    DomainShift(DomainShiftArgs),
    /// Perplexity across inference noise levels and seeds.
    NoiseSweep(NoiseSweepArgs),
    /// Decode tokens after a context.
    Generate(GenerateArgs),
    /// Overlap between training samples and their neighbors.
    Leakage(LeakageArgs),
    /// Tables and plot data from stored reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BuildDbArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PrecomputeArgs {
    /// Output directory of `build-db`.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `store.bin` written by `precompute`.
    #[arg(long)]
    store: PathBuf,
    /// Continue from a checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from the matching tensors of another checkpoint (e.g. an off-model backbone).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory with `train/` and `valid/` text files.
    #[arg(long)]
    domain: PathBuf,
    #[arg(long, default_value_t = 7)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    domain: PathBuf,
    /// off | on-no-neighbors | on-ideal | on-noisy
    #[arg(long, default_value = "on-ideal")]
    mode: String,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DomainShiftArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    domain: Vec<PathBuf>,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NoiseSweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    domain: PathBuf,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Number of noise seeds, counted up from the global seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    context: String,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// greedy | multinomial | top-p
    #[arg(long, default_value = "greedy")]
    sampling: String,
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    /// Retrieve neighbors from this domain's training data.
    #[arg(long)]
    domain: Option<PathBuf>,
    /// Score the output against this text.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LeakageArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 8)]
    t: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory searched (recursively) for `report-*.json`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Effective configuration after the file, `--set` overrides and seed fallbacks.
struct Resolved {
    kv: KvConfig,
    rc: RunConfig,
}

impl Resolved {
    fn load(cli: &Cli) -> Result<Self> {
        let mut kv = match &cli.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        for s in &cli.set {
            kv.set(s)?;
        }
        let seed = match cli.seed {
            Some(s) => Some(s),
            None if kv.is_explicit("seed") => None,
            None => match std::env::var("RETROLITE_SEED") {
                Ok(v) => Some(
                    v.trim()
                        .parse()
                        .map_err(|_| CliError::new("E_CONFIG", format!("RETROLITE_SEED='{v}' is not an integer")))?,
                ),
                Err(_) => None,
            },
        };
        if let Some(s) = seed {
            kv.set(&format!("seed={s}"))?;
        }
        let rc = RunConfig::from_kv(&kv)?;
        Ok(Self { kv, rc })
    }

    fn text(&self) -> String {
        self.kv.to_text()
    }

    fn embedder(&self, d_emb: usize) -> EmbedderSpec {
        EmbedderSpec::hash(d_emb, self.rc.embed_seed)
    }

    fn load_corpus(&self, dir: &Path) -> Result<Corpus> {
        Ok(Corpus::load_dir(dir, self.rc.doc_mode, &ByteTokenizer)?.with_join(self.rc.join))
    }
}

fn load_model(res: &Resolved, path: &Path) -> Result<Model> {
    let ck = load_checkpoint(path, None)?;
    // explicitly configured architecture keys must match; the init seed may differ
    let sets_model = retrolite::config::KEYS
        .iter()
        .any(|(k, _, _)| k.starts_with("model.") && res.kv.is_explicit(k));
    if sets_model {
        let expected = retrolite::model::ModelConfig {
            seed: ck.config.seed,
            ..res.rc.model.clone()
        };
        if expected.hash() != ck.config.hash() {
            return Err(retrolite::error::Error::ConfigHash {
                checkpoint: ck.config.hash(),
                expected: expected.hash(),
            }
            .into());
        }
    }
    Ok(ck.to_model()?)
}

struct Domain {
    prepared: PreparedDomain,
}

fn load_domain(res: &Resolved, dir: &Path, model: &Model, run: &mut RunDir) -> Result<Domain> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into());
    let (train_dir, valid_dir) = (dir.join("train"), dir.join("valid"));
    run.input(&train_dir)?;
    run.input(&valid_dir)?;
    let mc = model.config();
    let train = corpus_documents(&res.load_corpus(&train_dir)?);
    let valid = corpus_documents(&res.load_corpus(&valid_dir)?);
    let mut prepared = PreparedDomain::build(
        &name,
        &train,
        valid,
        mc.chunk_len,
        mc.vocab_size as u32,
        res.embedder(mc.d_emb),
        res.rc.seed,
    )?;
    if let Some(n) = res.rc.nprobe {
        prepared.nprobe = n;
    }
    Ok(Domain { prepared })
}

fn report_name(r: &EvalReport) -> String {
    match r.mode.as_str() {
        "on-noisy" => format!("report-{}-{}-{}-s{}.json", r.dataset, r.mode, r.lambda_i, r.seed),
        m => format!("report-{}-{m}-s{}.json", r.dataset, r.seed),
    }
}

fn write_report(run: &mut RunDir, r: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    run.write(&report_name(r), json.as_bytes())?;
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_string_pretty(v).expect("serializes").into_bytes()
}

fn cmd_build_db(cli: &Cli, a: &BuildDbArgs) -> Result<()> {
    let mut res = Resolved::load(cli)?;
    if let Some(l) = a.chunk_len {
        res.kv.set(&format!("model.chunk_len={l}"))?;
        res.rc = RunConfig::from_kv(&res.kv)?;
    }
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.corpus)?;
    let corpus = res.load_corpus(&a.corpus)?;
    let spec = res.embedder(res.rc.model.d_emb);
    let (db, index, rep) = build_db(
        &corpus_documents(&corpus),
        res.rc.model.chunk_len,
        corpus.vocab_size,
        &spec,
        spec,
        res.rc.seed,
    )?;
    let p = run.path("db.bin");
    save_db(&p, &db)?;
    run.output(p);
    run.write("index.bin", &encode_index(&index))?;
    let p = run.path("embeddings.bin");
    save_embedding_table(&p, &db.embeddings)?;
    run.output(p);
    let p = run.path("tokens.bin");
    save_token_stream(&p, &corpus.stream().tokens, corpus.vocab_size)?;
    run.output(p);
    run.write("build.json", &json(&rep))?;
    run.write("config.txt", res.text().as_bytes())?;
    println!("{} entries, {} centroids, nprobe {}", rep.entries, rep.ncentroids, rep.nprobe);
    run.finish("build-db", &res.text(), res.rc.seed)
}

fn cmd_precompute(cli: &Cli, a: &PrecomputeArgs) -> Result<()> {
    let mut res = Resolved::load(cli)?;
    if let Some(k) = a.k {
        res.kv.set(&format!("model.k_neighbors={k}"))?;
        res.rc = RunConfig::from_kv(&res.kv)?;
    }
    let mut run = RunDir::open(&a.out)?;
    let (db_p, idx_p, tok_p) = (a.db.join("db.bin"), a.db.join("index.bin"), a.db.join("tokens.bin"));
    for p in [&db_p, &idx_p, &tok_p] {
        run.input(p)?;
    }
    let db = load_db(&db_p)?;
    let index = decode_index(&std::fs::read(&idx_p).map_err(|e| CliError::io(&idx_p, e))?)?;
    let (tokens, _) = load_token_stream(&tok_p)?;
    let samples = make_samples(&TokenSequence::new(tokens), res.rc.model.seq_len);
    if samples.too_short {
        return Err(CliError::new(
            "E_CORPUS",
            format!("corpus is shorter than one window of seq_len={}", res.rc.model.seq_len),
        ));
    }
    let params = RetrievalParams {
        k: res.rc.model.k_neighbors,
        nprobe: res.rc.nprobe.unwrap_or_else(|| default_index_params(db.len()).1),
        filter_continuations: res.rc.filter,
    };
    let store = precompute_neighbors(&db, &index, &db.embedder, &samples.samples, params)?;
    let p = run.path("store.bin");
    save_store(&p, &store)?;
    run.output(p);
    println!("{} samples, k={}", store.len(), store.k);
    run.finish("precompute", &res.text(), res.rc.seed)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.store)?;
    let store = load_store(&a.store)?;
    let mut model = build_model(&res.rc.model, res.rc.mode)?;
    if let Some(init) = &a.init {
        run.input(init)?;
        let base = load_checkpoint(init, None)?.to_model()?;
        let n = model.load_matching(&base);
        log::info!("initialized {n} tensors from {}", init.display());
    }
    if let Some(r) = &a.resume {
        run.input(r)?;
    }
    let out = train_loop(
        model,
        &store,
        &res.rc.train,
        LoopOptions {
            out_dir: Some(&a.out),
            resume: a.resume.as_deref(),
        },
    )?;
    for p in out.checkpoints {
        run.output(p);
    }
    run.output(run.path("loss.csv"));
    run.write("config.txt", res.text().as_bytes())?;
    if let Some(last) = out.history.last() {
        println!("step {}: loss {:.4}", last.step + 1, last.loss);
    }
    run.finish("train", &res.text(), res.rc.seed)
}

fn cmd_finetune(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.ckpt)?;
    let model = load_model(&res, &a.ckpt)?;
    let (train_dir, valid_dir) = (a.domain.join("train"), a.domain.join("valid"));
    run.input(&train_dir)?;
    run.input(&valid_dir)?;
    let train = corpus_documents(&res.load_corpus(&train_dir)?);
    let valid = corpus_documents(&res.load_corpus(&valid_dir)?);
    let name = a
        .domain
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into());
    let d_emb = model.config().d_emb;
    let out = finetune_domain(
        model,
        &name,
        &train,
        valid,
        res.embedder(d_emb),
        &res.rc.train,
        a.epochs,
        Some(&a.out),
    )?;
    run.output(run.path("split.json"));
    for p in out.checkpoints {
        run.output(p);
    }
    run.write("finetune.json", &json(&out.report))?;
    let table = finetune_table(std::slice::from_ref(&out.report));
    run.write("finetune.csv", table.as_bytes())?;
    print!("{table}");
    run.finish("finetune", &res.text(), res.rc.seed)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.ckpt)?;
    let model = load_model(&res, &a.ckpt)?;
    let mode = EvalMode::parse(&a.mode, a.lambda_i.unwrap_or(res.rc.lambda_i))?;
    let dom = load_domain(&res, &a.domain, &model, &mut run)?;
    let r = plug_and_play_eval(&model, &dom.prepared, mode, res.rc.seed, &res.rc.train.regularizer.label())?;
    write_report(&mut run, &r)?;
    println!("{} {mode}: perplexity {} over {} tokens", r.dataset, r.perplexity, r.tokens_scored);
    run.finish("eval", &res.text(), res.rc.seed)
}

fn cmd_domain_shift(cli: &Cli, a: &DomainShiftArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.ckpt)?;
    let model = load_model(&res, &a.ckpt)?;
    let lambda = a.lambda_i.unwrap_or(res.rc.lambda_i);
    let modes = match model.mode() {
        ModelMode::Off => vec![EvalMode::Off],
        ModelMode::On => vec![EvalMode::Off, EvalMode::OnNoNeighbors, EvalMode::OnIdeal, EvalMode::OnNoisy(lambda)],
    };
    let reg = res.rc.train.regularizer.label();
    let mut all = Vec::new();
    for d in &a.domain {
        let dom = load_domain(&res, d, &model, &mut run)?;
        for &m in &modes {
            let r = plug_and_play_eval(&model, &dom.prepared, m, res.rc.seed, &reg)?;
            write_report(&mut run, &r)?;
            all.push(r);
        }
    }
    report::sort_reports(&mut all);
    let table = report::render_table(&all);
    run.write("domain_shift.txt", table.as_bytes())?;
    print!("{table}");
    run.finish("domain-shift", &res.text(), res.rc.seed)
}

fn cmd_noise_sweep(cli: &Cli, a: &NoiseSweepArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.ckpt)?;
    let model = load_model(&res, &a.ckpt)?;
    let dom = load_domain(&res, &a.domain, &model, &mut run)?;
    let lambdas = a.lambdas.clone().unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
    if a.seeds == 0 {
        return Err(CliError::new("E_ARG", "--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| res.rc.seed + i).collect();
    let reg = res.rc.train.regularizer.label();
    let rows = noisy_retrieval_sweep(&model, &dom.prepared, &lambdas, &seeds, &reg)?;
    for r in rows.iter().flat_map(|row| &row.reports) {
        write_report(&mut run, r)?;
    }
    let csv = sweep_csv(&rows);
    run.write("sweep.csv", csv.as_bytes())?;
    run.write("sweep.json", &json(&rows))?;
    print!("{csv}");
    run.finish("noise-sweep", &res.text(), res.rc.seed)
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.ckpt)?;
    let model = load_model(&res, &a.ckpt)?;
    let sampling = Sampling::parse(&a.sampling, a.p)?;
    let tok = ByteTokenizer;
    let context = tok.encode(&retrolite::corpus::normalize_text(&a.context));
    let dom = match &a.domain {
        Some(d) => Some(load_domain(&res, d, &model, &mut run)?),
        None => None,
    };
    let (mode, source) = match (model.mode(), &dom) {
        (ModelMode::Off, _) => (EvalMode::Off, NeighborSource::None),
        (ModelMode::On, Some(d)) => (EvalMode::OnIdeal, d.prepared.source(model.config().k_neighbors)),
        (ModelMode::On, None) => (EvalMode::OnNoNeighbors, NeighborSource::None),
    };
    let ctx = EvalContext {
        model: &model,
        mode,
        source,
        seed: res.rc.seed,
    };
    let out = generate(&ctx, &context, sampling, a.n)?;
    let text = tok.decode(&out);
    let similarity = match &a.reference {
        Some(r) => {
            let spec = res.embedder(model.config().d_emb);
            Some(semantic_similarity(&out, &tok.encode(&retrolite::corpus::normalize_text(r)), &spec)?)
        }
        None => None,
    };
    let record = serde_json::json!({
        "context": a.context,
        "sampling": a.sampling,
        "p": a.p,
        "mode": mode.name(),
        "tokens": out,
        "text": text,
        "similarity": similarity,
    });
    run.write("generation.json", &json(&record))?;
    println!("{text}");
    run.finish("generate", &res.text(), res.rc.seed)
}

fn cmd_leakage(cli: &Cli, a: &LeakageArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.store)?;
    let store = load_store(&a.store)?;
    let samples: Vec<&[u32]> = store.records.iter().map(|r| r.src.as_slice()).collect();
    let sets: Vec<_> = store.records.iter().map(|r| r.neighbors.clone()).collect();
    let rep = leakage_report(&samples, &sets, a.t)?;
    run.write("leakage.json", &json(&rep))?;
    println!(
        "{} of {} neighbors share a run of {} tokens with their sequence ({:.4}); mean Jaccard {:.4}",
        rep.overlapping, rep.neighbors, rep.t, rep.fraction, rep.mean_jaccard
    );
    run.finish("leakage", &res.text(), res.rc.seed)
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let res = Resolved::load(cli)?;
    let reports = report::collect_reports(&a.run)?;
    let mut run = RunDir::open(&a.out)?;
    run.input(&a.run)?;
    let table = report::render_table(&reports);
    run.write("report.txt", table.as_bytes())?;
    run.write("report.csv", report::reports_csv(&reports).as_bytes())?;
    run.write("lambda_plot.csv", report::lambda_plot_csv(&reports).as_bytes())?;
    print!("{table}");
    run.finish("report", &res.text(), res.rc.seed)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildDb(a) => cmd_build_db(cli, a),
        Command::Precompute(a) => cmd_precompute(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Finetune(a) => cmd_finetune(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::DomainShift(a) => cmd_domain_shift(cli, a),
        Command::NoiseSweep(a) => cmd_noise_sweep(cli, a),
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Leakage(a) => cmd_leakage(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {line}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
