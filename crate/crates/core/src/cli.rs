//! Command-line surface. Reports go to stdout, progress to stderr.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis;
use crate::checkpoint;
use crate::config::ConfigFile;
use crate::corpus::{self, Document, Transform};
use crate::error::Error;
use crate::eval::{self, InferenceConfig};
use crate::nvdm::{Activation, ModelConfig, NvdmModel, Variant};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pwvae", version, about = "Piecewise and Gaussian latent variable document models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Report sampled-bound perplexity, optionally with iterative inference.
    Eval(EvalArgs),
    /// Nearest words in decoder space.
    Query(QueryArgs),
    /// Per-word KL-gradient sensitivity counts.
    Sensitivity(SensitivityArgs),
    /// Export posterior means per document.
    ExportMeans(ExportArgs),
    /// Write a synthetic two-mode corpus.
    Synth(SynthArgs),
    /// Top words for latent draws from the learned prior.
    SamplePrior(SamplePriorArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// g, p or h.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub pieces: Option<usize>,
    #[arg(long)]
    pub gauss_dims: Option<usize>,
    #[arg(long)]
    pub piece_dims: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// prelu or softsign.
    #[arg(long)]
    pub activation: Option<String>,
    /// none or log1p_tf.
    #[arg(long)]
    pub transform: Option<String>,
    /// Training documents.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Validation documents; defaults to the last tenth of the training file.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path (defaults to `<out>.log`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub kl_anneal: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub kl_weight: f64,
    #[arg(long)]
    pub iterative: bool,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub inf_lr: f64,
    #[arg(long, default_value_t = 10)]
    pub inf_patience: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub word: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_m: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `doc_id<TAB>label` file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of documents.
    #[arg(long, default_value_t = 2000)]
    pub docs: usize,
    /// Vocabulary size (even).
    #[arg(long, default_value_t = 200)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output prefix for `.vocab`, `.docs` and `.labels`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplePriorArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub draws: usize,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn parse_flag<T: std::str::FromStr<Err = Error>>(value: Option<String>, key: &str, file: &ConfigFile) -> CliResult<Option<T>> {
    let raw = value.or_else(|| file.raw(key).map(str::to_string));
    raw.map(|v| v.parse().map_err(|e: Error| usage(e.to_string())))
        .transpose()
}

fn pick<T: std::str::FromStr>(file: &ConfigFile, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
    file.pick(flag, key, default).map_err(|e| usage(e.to_string()))
}

fn pick_opt<T: std::str::FromStr>(file: &ConfigFile, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
    file.pick_opt(flag, key).map_err(|e| usage(e.to_string()))
}

/// Resolves and validates the model shape from flags and config values.
pub fn model_config(args: &TrainArgs, file: &ConfigFile, vocab_size: usize) -> CliResult<ModelConfig> {
    let variant: Variant = parse_flag(args.variant.clone(), "variant", file)?
        .ok_or_else(|| usage("--variant is required (g, p or h)"))?;
    let pieces = pick_opt(file, args.pieces, "pieces")?;
    let gauss_dims = pick_opt(file, args.gauss_dims, "gauss_dims")?;
    let piece_dims = pick_opt(file, args.piece_dims, "piece_dims")?;
    if !variant.has_piecewise() && (pieces.is_some() || piece_dims.is_some()) {
        return Err(usage(format!("--pieces/--piece-dims do not apply to variant {variant}")));
    }
    if !variant.has_gaussian() && gauss_dims.is_some() {
        return Err(usage(format!("--gauss-dims does not apply to variant {variant}")));
    }
    let mut c = ModelConfig::new(variant, vocab_size);
    c.hidden = pick(file, args.hidden, "hidden", c.hidden)?;
    c.gauss_dims = gauss_dims.unwrap_or(c.gauss_dims);
    c.piece_dims = piece_dims.unwrap_or(c.piece_dims);
    c.pieces = pieces.unwrap_or(c.pieces);
    c.activation = parse_flag::<Activation>(args.activation.clone(), "activation", file)?.unwrap_or(c.activation);
    c.transform = parse_flag::<Transform>(args.transform.clone(), "transform", file)?.unwrap_or(c.transform);
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

pub fn train_config(args: &TrainArgs, file: &ConfigFile) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let c = TrainConfig {
        learning_rate: pick(file, args.lr, "lr", d.learning_rate)?,
        batch_size: pick(file, args.batch_size, "batch_size", d.batch_size)?,
        adam_beta1: pick(file, None, "adam_beta1", d.adam_beta1)?,
        adam_beta2: pick(file, None, "adam_beta2", d.adam_beta2)?,
        adam_eps: pick(file, None, "adam_eps", d.adam_eps)?,
        clip_norm: pick(file, args.clip_norm, "clip_norm", d.clip_norm)?,
        kl_anneal_batches: pick(file, args.kl_anneal, "kl_anneal", d.kl_anneal_batches)?,
        max_epochs: pick(file, args.max_epochs, "max_epochs", d.max_epochs)?,
        patience: pick(file, args.patience, "patience", d.patience)?,
        seed: pick(file, args.seed, "seed", d.seed)?,
        threads: pick(file, args.threads, "threads", d.threads)?,
        train_samples: pick(file, None, "train_samples", d.train_samples)?,
        valid_samples: pick(file, None, "valid_samples", d.valid_samples)?,
    };
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn load_docs_for(model: &NvdmModel, path: &Path) -> CliResult<Vec<Document>> {
    require_file(path)?;
    let (docs, report) = corpus::load_docs(path, model.config.vocab_size)?;
    if report.dropped_empty > 0 {
        eprintln!("dropped {} empty documents from {}", report.dropped_empty, path.display());
    }
    Ok(docs)
}

fn load_model(path: &Path) -> CliResult<NvdmModel> {
    require_file(path)?;
    Ok(checkpoint::load(path)?)
}

fn load_vocab_for(model: &NvdmModel, path: &Path) -> CliResult<Vec<String>> {
    require_file(path)?;
    let vocab = corpus::load_vocab(path)?;
    if vocab.len() != model.config.vocab_size {
        return Err(CliError::Runtime(Error::Checkpoint(format!(
            "vocabulary {} has {} tokens, model expects {}",
            path.display(),
            vocab.len(),
            model.config.vocab_size
        ))));
    }
    Ok(vocab)
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(Error::io("<stdout>", e)))
}

fn write_or_emit(path: Option<&Path>, out: &mut dyn Write, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Runtime(Error::io(p, e))),
        None => emit(out, text),
    }
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = match &args.config {
        Some(p) => {
            require_file(p)?;
            ConfigFile::load(p).map_err(|e| usage(e.to_string()))?
        }
        None => ConfigFile::default(),
    };
    let corpus_path = pick_opt(&file, args.corpus.clone(), "corpus")?.ok_or_else(|| usage("--corpus is required"))?;
    let vocab_path = pick_opt(&file, args.vocab.clone(), "vocab")?.ok_or_else(|| usage("--vocab is required"))?;
    let ckpt_path = pick_opt(&file, args.out.clone(), "out")?.ok_or_else(|| usage("--out is required"))?;
    let valid_path = pick_opt(&file, args.valid.clone(), "valid")?;
    for p in [Some(&corpus_path), Some(&vocab_path), valid_path.as_ref()].into_iter().flatten() {
        require_file(p)?;
    }
    let vocab = corpus::load_vocab(&vocab_path)?;
    let mconf = model_config(&args, &file, vocab.len())?;
    let tconf = train_config(&args, &file)?;

    let (mut train_docs, report) = corpus::load_docs(&corpus_path, vocab.len())?;
    eprintln!(
        "loaded {} documents ({} empty dropped) from {}",
        report.documents,
        report.dropped_empty,
        corpus_path.display()
    );
    let valid_docs = match &valid_path {
        Some(p) => corpus::load_docs(p, vocab.len())?.0,
        None => {
            let n = (train_docs.len() / 10).max(1);
            if n >= train_docs.len() {
                return Err(usage("need at least two documents when --valid is absent"));
            }
            train_docs.split_off(train_docs.len() - n)
        }
    };
    let model = NvdmModel::new(mconf, tconf.seed)?;
    eprintln!("epoch\ttrain_bound\tvalid_bound\tkl_g\tkl_p\twallclock_s");
    let outcome = trainer::train_with(model, &train_docs, &valid_docs, &tconf, |r| {
        eprintln!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
            r.epoch, r.train_bound, r.valid_bound, r.kl_gaussian, r.kl_piecewise, r.wallclock_s
        );
    })?;
    checkpoint::save(&outcome.model, &ckpt_path)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut s = ckpt_path.clone().into_os_string();
        s.push(".log");
        PathBuf::from(s)
    });
    std::fs::write(&log_path, outcome.log.to_tsv()).map_err(|e| Error::io(&log_path, e))?;
    emit(
        out,
        &format!(
            "best_epoch\t{}\nbest_valid_bound\t{:.10e}\ncheckpoint\t{}\n",
            outcome.best_epoch,
            outcome.best_valid_bound,
            ckpt_path.display()
        ),
    )
}

fn cmd_eval(args: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.samples == 0 {
        return Err(usage("--samples must be >= 1"));
    }
    let model = load_model(&args.ckpt)?;
    let docs = load_docs_for(&model, &args.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut text = eval::evaluate_weighted(&model, &docs, args.samples, args.kl_weight, &mut rng)?.to_tsv();
    if args.iterative {
        let cfg = InferenceConfig {
            steps_max: args.steps,
            learning_rate: args.inf_lr,
            patience: args.inf_patience,
            eval_samples: args.samples,
            ..InferenceConfig::default()
        };
        let (amortized, refined) = eval::evaluate_iterative(&model, &docs, &cfg, &mut rng)?;
        eprintln!(
            "iterative inference: mean bound {:.4} -> {:.4}, perplexity {:.4} -> {:.4}",
            amortized.mean_bound, refined.mean_bound, amortized.perplexity, refined.perplexity
        );
        text.push_str(&refined.to_tsv());
    }
    write_or_emit(args.out.as_deref(), out, &text)
}

fn cmd_query(args: QueryArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&args.ckpt)?;
    let vocab = load_vocab_for(&model, &args.vocab)?;
    let neighbors = analysis::word_neighbors(&model, &vocab, &args.word, args.k)?;
    let text: String = neighbors
        .iter()
        .map(|n| format!("{}\t{:.10e}\n", n.token, n.distance))
        .collect();
    emit(out, &text)
}

fn cmd_sensitivity(args: SensitivityArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&args.ckpt)?;
    let vocab = load_vocab_for(&model, &args.vocab)?;
    let docs = load_docs_for(&model, &args.corpus)?;
    let counts = analysis::kl_sensitivity(&model, &docs, args.top_m)?;
    let cell = |c: &Option<Vec<u32>>, w: usize| c.as_ref().map_or("-".to_string(), |v| v[w].to_string());
    let mut text = format!("# documents\t{}\n# top_m\t{}\ntoken\tgaussian\tpiecewise\n", docs.len(), args.top_m);
    for (w, tok) in vocab.iter().enumerate() {
        text.push_str(&format!("{tok}\t{}\t{}\n", cell(&counts.gaussian, w), cell(&counts.piecewise, w)));
    }
    emit(out, &text)
}

fn cmd_export(args: ExportArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&args.ckpt)?;
    let mut docs = load_docs_for(&model, &args.corpus)?;
    if let Some(p) = &args.labels {
        require_file(p)?;
        let labels = corpus::load_labels(p)?;
        for d in &mut docs {
            d.label = labels.get(&d.id).cloned();
        }
    }
    let n = analysis::export_posterior_means(&model, &docs, &args.out)?;
    emit(out, &format!("exported\t{n}\n"))
}

fn cmd_synth(args: SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.vocab < 2 || args.vocab % 2 != 0 {
        return Err(usage(format!("--vocab must be even and >= 2, got {}", args.vocab)));
    }
    if args.docs == 0 {
        return Err(usage("--docs must be >= 1"));
    }
    let corpus = corpus::make_synthetic_bimodal(args.docs, args.vocab, args.seed)?;
    let paths = corpus::save_corpus_files(&corpus, &args.out)?;
    let text: String = paths.iter().map(|p| format!("{}\n", p.display())).collect();
    emit(out, &text)
}

fn cmd_sample_prior(args: SamplePriorArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&args.ckpt)?;
    let vocab = load_vocab_for(&model, &args.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let lists = eval::sample_prior_docs(&model, args.draws, args.top_k, &mut rng)?;
    let text: String = lists
        .iter()
        .map(|l| {
            let words: Vec<&str> = l.iter().map(|&w| vocab[w].as_str()).collect();
            format!("{}\n", words.join(" "))
        })
        .collect();
    emit(out, &text)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Query(a) => cmd_query(a, out),
        Command::Sensitivity(a) => cmd_sensitivity(a, out),
        Command::ExportMeans(a) => cmd_export(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::SamplePrior(a) => cmd_sample_prior(a, out),
    }
}
