//! `mlvae`: train, evaluate and probe multi-level VAE text models.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 on any other failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlvae::corpus::{self, IngestReport, Paragraph, Vocabulary};
use mlvae::metrics::generation_report;
use mlvae::trainer::{self, Example, LoadedModel, ModelConfig, Precision, TrainOptions, TRAIN_LOG_HEADER};
use mlvae::workbench::{self, CodeMode, GenOptions, DEFAULT_SAMPLE_COUNT};
use mlvae::Error;

#[derive(Parser)]
#[command(name = "mlvae", version, about = "Multi-level VAE for long-form text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a corpus (one document per line).
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_VOCAB_SIZE)]
        max_size: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint with config and vocabulary sidecars.
    Train(TrainArgs),
    /// Report NLL, KL and perplexity on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Input is tab-separated condition/target pairs.
        #[arg(long)]
        paired: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BLEU, self-BLEU, unique n-grams and entropy of a sample file.
    Metrics {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode paragraphs from prior samples.
    Sample {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_COUNT)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode equidistant points between two prior samples.
    Interpolate {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        seed_a: u64,
        #[arg(long)]
        seed_b: u64,
        /// Intermediate points between the two endpoints.
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Shift documents along an attribute vector and decode them.
    Transfer {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        positive: PathBuf,
        #[arg(long)]
        negative: PathBuf,
        /// Documents to transfer, one per line.
        #[arg(long)]
        input: PathBuf,
        /// Use one posterior sample per document for the class means.
        #[arg(long)]
        stochastic_codes: bool,
        /// Subtract the vector instead of adding it.
        #[arg(long)]
        reverse: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a target text for each condition line of a paired checkpoint.
    Generate {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        input: PathBuf,
        /// Sample the code instead of using the posterior mean.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write posterior-mean codes as CSV rows `label,z_1,...`.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Documents, optionally prefixed by `label<TAB>`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary file; built from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Explicit held-out corpus; otherwise a seeded share of the training corpus.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Corpus lines are `condition<TAB>target` pairs.
    #[arg(long)]
    paired: bool,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentences per paragraph (default: training-corpus median).
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    max_words: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenArgs {
    fn load(&self) -> mlvae::Result<(LoadedModel, GenOptions)> {
        let m = LoadedModel::load(&self.checkpoint)?;
        let mut opts = GenOptions::for_model(&m);
        if let Some(s) = self.sentences {
            opts.sentences = s;
        }
        if let Some(w) = self.max_words {
            opts.max_words = w;
        }
        if opts.sentences == 0 || opts.max_words == 0 {
            return Err(Error::Usage("--sentences and --max-words must be positive".into()));
        }
        Ok((m, opts))
    }
}

fn emit(out: Option<&Path>, text: &str) -> mlvae::Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let _ = io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn report_ingest(report: &IngestReport) {
    if report.lines_skipped + report.sentences_dropped + report.tokens_truncated > 0 || !report.warnings.is_empty() {
        eprint!("{report}");
    }
}

fn encode_docs(docs: &[Vec<Vec<String>>], vocab: &Vocabulary, cfg: &ModelConfig, report: &mut IngestReport) -> mlvae::Result<Vec<Paragraph>> {
    docs.iter()
        .map(|d| Ok(vocab.encode(d)?.truncated(cfg.max_sentences, cfg.max_words, report)))
        .collect()
}

fn load_examples(path: &Path, paired: bool, vocab: &Vocabulary, cfg: &ModelConfig, report: &mut IngestReport) -> mlvae::Result<Vec<Example>> {
    if paired {
        let pairs = corpus::load_paired(path, report)?;
        pairs
            .iter()
            .map(|p| {
                let c = vocab.encode(&p.condition)?.truncated(cfg.max_sentences, cfg.max_words, report);
                let t = vocab.encode(&p.target)?.truncated(cfg.max_sentences, cfg.max_words, report);
                Ok(Example::paired(c, t))
            })
            .collect()
    } else {
        let docs = corpus::load_corpus(path, report)?;
        Ok(encode_docs(&docs, vocab, cfg, report)?.into_iter().map(Example::document).collect())
    }
}

fn load_paragraphs(path: &Path, m: &LoadedModel) -> mlvae::Result<Vec<Paragraph>> {
    let mut report = IngestReport::default();
    let docs = corpus::load_corpus(path, &mut report)?;
    let out = encode_docs(&docs, m.vocab()?, &m.config, &mut report)?;
    report_ingest(&report);
    Ok(out)
}

fn train(args: &TrainArgs) -> mlvae::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(v) = &args.variant {
        cfg.set("variant", v)?;
    }
    if let Some(s) = args.steps {
        cfg.max_steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(|e| Error::Usage(e.to_string()))?;
    }
    cfg.paired = cfg.paired || args.paired;

    let mut report = IngestReport::default();
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let docs: Vec<Vec<Vec<String>>> = if cfg.paired {
                corpus::load_paired(&args.corpus, &mut IngestReport::default())?
                    .into_iter()
                    .flat_map(|p| [p.condition, p.target])
                    .collect()
            } else {
                corpus::load_corpus(&args.corpus, &mut IngestReport::default())?
            };
            Vocabulary::from_documents(&docs, cfg.vocab_size, 1)?
        }
    };
    cfg.vocab_size = vocab.len();
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let examples = load_examples(&args.corpus, cfg.paired, &vocab, &cfg, &mut report)?;
    let heldout = args
        .heldout
        .as_ref()
        .map(|p| load_examples(p, cfg.paired, &vocab, &cfg, &mut report))
        .transpose()?;
    report_ingest(&report);

    let opts = TrainOptions {
        checkpoint: Some(args.checkpoint.clone()),
        heldout,
        vocab: Some(vocab),
    };
    let mut stdout = io::stdout().lock();
    let _ = writeln!(stdout, "{TRAIN_LOG_HEADER}");
    let mut log = |line: &trainer::LogLine| {
        let _ = writeln!(stdout, "{line}");
    };
    match cfg.precision {
        Precision::F32 => trainer::train::<f32>(cfg, &examples, &opts, &mut log).map(|_| ()),
        Precision::F64 => trainer::train::<f64>(cfg, &examples, &opts, &mut log).map(|_| ()),
    }
}

fn read_token_lines(path: &Path) -> mlvae::Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect())
}

fn render_all(m: &LoadedModel, paras: impl IntoIterator<Item = mlvae::decoder::DecodedParagraph>) -> mlvae::Result<String> {
    let mut out = String::new();
    for p in paras {
        out.push_str(&m.render(&p)?);
        out.push('\n');
    }
    Ok(out)
}

fn run(cli: Cli) -> mlvae::Result<()> {
    match cli.command {
        Command::BuildVocab {
            corpus: path,
            max_size,
            min_freq,
            out,
        } => {
            let mut report = IngestReport::default();
            let docs = corpus::load_corpus(&path, &mut report)?;
            report_ingest(&report);
            Vocabulary::from_documents(&docs, max_size, min_freq)?.save(&out)
        }
        Command::Train(args) => train(&args),
        Command::Eval {
            checkpoint,
            corpus: path,
            paired,
            seed,
            out,
        } => {
            let m = LoadedModel::load(&checkpoint)?;
            let mut report = IngestReport::default();
            let docs = load_examples(&path, paired || m.config.paired, m.vocab()?, &m.config, &mut report)?;
            report_ingest(&report);
            let r = trainer::evaluate(&m.store, &m.config, &m.model, &docs, seed)?;
            emit(out.as_deref(), &r.to_string())
        }
        Command::Metrics { samples, references, out } => {
            let s = read_token_lines(&samples)?;
            let refs = references.as_deref().map(read_token_lines).transpose()?;
            let r = generation_report(&s, refs.as_deref())?;
            emit(out.as_deref(), &r.to_string())
        }
        Command::Sample { gen, count, seed } => {
            let (m, opts) = gen.load()?;
            let out = workbench::sample_unconditional(&m, count, seed, opts)?;
            emit(gen.out.as_deref(), &render_all(&m, out)?)
        }
        Command::Interpolate { gen, seed_a, seed_b, steps } => {
            let (m, opts) = gen.load()?;
            let out = workbench::interpolate(&m, seed_a, seed_b, steps, opts)?;
            emit(gen.out.as_deref(), &render_all(&m, out.into_iter().map(|(_, p)| p))?)
        }
        Command::Transfer {
            gen,
            positive,
            negative,
            input,
            stochastic_codes,
            reverse,
            seed,
        } => {
            let (m, opts) = gen.load()?;
            let pos = load_paragraphs(&positive, &m)?;
            let neg = load_paragraphs(&negative, &m)?;
            let mut attr = workbench::attribute_vector(&m, &pos, &neg, stochastic_codes.then_some(seed))?;
            if reverse {
                attr.iter_mut().for_each(|x| *x = -*x);
            }
            let docs = load_paragraphs(&input, &m)?;
            let out = docs
                .iter()
                .map(|d| workbench::attribute_transfer(&m, d, &attr, opts).map(|(_, p)| p))
                .collect::<mlvae::Result<Vec<_>>>()?;
            emit(gen.out.as_deref(), &render_all(&m, out)?)
        }
        Command::Generate { gen, input, sample, seed } => {
            let (m, opts) = gen.load()?;
            let titles = load_paragraphs(&input, &m)?;
            let out = titles
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mode = if sample {
                        CodeMode::Sample {
                            seed: seed.wrapping_add(i as u64),
                        }
                    } else {
                        CodeMode::Mean
                    };
                    workbench::conditional_generate(&m, t, mode, opts)
                })
                .collect::<mlvae::Result<Vec<_>>>()?;
            emit(gen.out.as_deref(), &render_all(&m, out)?)
        }
        Command::ExportLatents { checkpoint, corpus: path, out } => {
            let m = LoadedModel::load(&checkpoint)?;
            let mut report = IngestReport::default();
            let labeled = corpus::load_labeled(&path, &mut report)?;
            let vocab = m.vocab()?;
            let docs = labeled
                .into_iter()
                .map(|(l, d)| Ok((l, vocab.encode(&d)?.truncated(m.config.max_sentences, m.config.max_words, &mut report))))
                .collect::<mlvae::Result<Vec<_>>>()?;
            report_ingest(&report);
            workbench::export_latents(&m, &docs, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
