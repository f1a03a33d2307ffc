//! The `v2s` command line: end-to-end workflows from corpus to report, plus
//! an interactive loop for analogies and interpolation sweeps.
//!
//! Every subcommand accepts `--config <file>` (JSON mirroring [`RunConfig`]);
//! explicit flags override config fields, and the effective configuration is
//! written next to the outputs as `config.json`. All randomness is controlled
//! by `--seed`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::algebra::{self, AnalogyOutput, AnalogyRecord};
use crate::analysis::{average_rank, correlation_matrix, rank_encoders, ScoreTable};
use crate::corpus::{
    build_vocabulary, load_sentences_with, RawSentence, TokenSequence, Tokenizer, Vocabulary,
    WhitespaceTokenizer,
};
use crate::decoder::{
    train, Conditioning, DecoderCheckpoint, DecoderConfig, DecoderModel, HeadKind, Hyperparams,
    TrainedDecoder,
};
use crate::diagnostics::{diagnose, lexical_overlap_f1, write_pairs, EvalSentence};
use crate::encoders::{
    write_binary_embeddings, write_text_embeddings, Encoder, EncoderKind, PrecomputedStore,
    SentenceEmbedding, TokenEmbeddingTable,
};
use crate::fixtures;

/// Paths, encoder choice, decoder architecture and hyperparameters for a run.
/// Serialized as `config.json` next to every command's outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// `avg`, `max`, `hier[:n]`, `concat:<part,part,...>` or `precomputed`.
    pub encoder: Option<String>,
    pub encoder_id: Option<String>,
    /// Token embedding table: a file path or `random:<dim>[:<seed>]`.
    pub table: Option<String>,
    pub max_len: Option<usize>,
    pub lowercase: Option<bool>,
    pub min_freq: Option<usize>,
    pub max_vocab: Option<usize>,
    pub word_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub conditioning: Option<Conditioning>,
    pub head: Option<HeadKind>,
    pub mos_components: Option<usize>,
    pub max_gen_len: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "v2s",
    version,
    about = "Reconstruct sentences from sentence embeddings and analyze the results"
)]
struct Cli {
    /// JSON config file; explicit flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output artifacts (default: v2s-out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed controlling all randomness
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary from a one-sentence-per-line corpus
    BuildVocab(BuildVocabArgs),
    /// Encode a corpus into a sentence embedding file
    Encode(EncodeArgs),
    /// Train the conditional decoder against a frozen encoder
    Train(TrainArgs),
    /// Reconstruct text from an embedding file or from sentences
    Generate(GenerateArgs),
    /// Score reconstructions and write a diagnostic report
    Diagnose(DiagnoseArgs),
    /// Correlate a diagnostic score table with a downstream score table
    Correlate(CorrelateArgs),
    /// Rank encoders from a score table row (or averaged over all rows)
    Rank(RankArgs),
    /// Decode analogies a - b + c
    Analogy(AnalogyArgs),
    /// Decode interpolations between two sentences
    Interpolate(InterpolateArgs),
    /// Interactive reconstruction, analogy and interpolation loop
    Repl(ReplArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Keep only sentences of at most this many tokens
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lowercase: Option<bool>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    max_vocab: Option<usize>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    /// Output format: text or binary
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long)]
    lowercase: Option<bool>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    /// Precomputed sentence embedding file (for --encoder precomputed)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lowercase: Option<bool>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    /// concat or init_state
    #[arg(long)]
    conditioning: Option<String>,
    /// softmax or mos
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    mos_components: Option<usize>,
    #[arg(long)]
    max_gen_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Sentence embedding file to decode, one vector per corpus line
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Alternatively: encode and decode these sentences
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lowercase: Option<bool>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    /// Precomputed sentence embedding file (for --encoder precomputed)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lowercase: Option<bool>,
    /// Optional soft scorer; `lexical` scores token-overlap F1 in [0, 100]
    #[arg(long)]
    soft_scorer: Option<String>,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    /// Diagnostic score table CSV (default: bundled metrics table)
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Downstream score table CSV (default: bundled downstream table)
    #[arg(long)]
    downstream: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    /// Score table CSV (default: bundled metrics table)
    #[arg(long)]
    table: Option<PathBuf>,
    /// Row to rank by
    #[arg(long, conflicts_with = "average")]
    by: Option<String>,
    /// Rank by mean rank across all rows
    #[arg(long)]
    average: bool,
}

#[derive(Args, Debug)]
struct AnalogyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    /// JSON-lines batch file of {a, b, c} records
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, requires = "b", requires = "c")]
    a: Option<String>,
    #[arg(long)]
    b: Option<String>,
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    lowercase: Option<bool>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    #[arg(long)]
    a: Option<String>,
    #[arg(long)]
    b: Option<String>,
    /// Comma-separated mixing weights for sentence A
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    alphas: String,
    /// Allow weights outside [0, 1]
    #[arg(long)]
    extrapolate: bool,
    #[arg(long)]
    lowercase: Option<bool>,
}

#[derive(Args, Debug)]
struct ReplArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    table: Option<String>,
    #[arg(long)]
    lowercase: Option<bool>,
}

/// Parses and runs; returns the process exit code. Usage errors exit 2,
/// module errors exit 1, `--help`/`--version` exit 0.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    match cli.command {
        Command::BuildVocab(args) => cmd_build_vocab(cfg, args),
        Command::Encode(args) => cmd_encode(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Generate(args) => cmd_generate(cfg, args),
        Command::Diagnose(args) => cmd_diagnose(cfg, args),
        Command::Correlate(args) => cmd_correlate(cfg, args),
        Command::Rank(args) => cmd_rank(cfg, args),
        Command::Analogy(args) => cmd_analogy(cfg, args),
        Command::Interpolate(args) => cmd_interpolate(cfg, args),
        Command::Repl(args) => cmd_repl(cfg, args),
    }
}

struct OutDir {
    dir: PathBuf,
}

impl OutDir {
    fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("v2s-out"));
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_string(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        self.write_string(name, &format!("{:#}\n", value))
    }

    fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let value = serde_json::to_value(cfg)?;
        self.write_json("config.json", &value)?;
        Ok(())
    }
}

fn required<T: Clone>(flag: &Option<T>, cfg: &Option<T>, name: &str) -> Result<T> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| anyhow!("missing required option --{name} (or config field `{name}`)"))
}

fn pick<T: Clone>(flag: &Option<T>, cfg: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| cfg.clone()).unwrap_or(default)
}

fn tokenizer_for(lowercase: bool) -> WhitespaceTokenizer {
    WhitespaceTokenizer { lowercase }
}

fn parse_encoder_kind(s: &str) -> Result<EncoderKind> {
    let parse_leaf = |part: &str| -> Result<EncoderKind> {
        match part {
            "avg" => Ok(EncoderKind::Avg),
            "max" => Ok(EncoderKind::Max),
            "hier" => Ok(EncoderKind::Hier { n: 3 }),
            _ => {
                if let Some(n) = part.strip_prefix("hier:") {
                    let n: usize = n.parse().context("hier window width")?;
                    Ok(EncoderKind::Hier { n })
                } else {
                    bail!("unknown encoder part {part:?} (expected avg, max or hier[:n])")
                }
            }
        }
    };
    if s == "precomputed" {
        return Ok(EncoderKind::Precomputed {
            path: PathBuf::new(),
        });
    }
    if let Some(list) = s.strip_prefix("concat:") {
        let parts: Result<Vec<EncoderKind>> = list.split(',').map(parse_leaf).collect();
        let parts = parts?;
        if parts.is_empty() {
            bail!("concat needs at least one part");
        }
        return Ok(EncoderKind::Concat { parts });
    }
    parse_leaf(s)
}

fn load_table(spec: &str, vocab: Option<&Vocabulary>, default_seed: u64) -> Result<TokenEmbeddingTable> {
    if let Some(rest) = spec.strip_prefix("random:") {
        let mut it = rest.split(':');
        let dim: usize = it
            .next()
            .ok_or_else(|| anyhow!("random table needs a dimension"))?
            .parse()
            .context("random table dimension")?;
        let seed = match it.next() {
            Some(s) => s.parse().context("random table seed")?,
            None => default_seed,
        };
        let vocab = vocab.ok_or_else(|| {
            anyhow!("a random token table needs --vocab to know the token set")
        })?;
        let tokens: Vec<String> = (0..vocab.len() as u32)
            .filter_map(|id| vocab.token_of(id).map(str::to_string))
            .filter(|t| !crate::corpus::SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        Ok(TokenEmbeddingTable::random(&tokens, dim, seed))
    } else {
        TokenEmbeddingTable::from_text_file(spec)
            .with_context(|| format!("loading token embedding table {spec}"))
    }
}

struct EncoderSetup {
    encoder: Encoder,
}

fn build_encoder(
    cfg: &RunConfig,
    encoder_flag: &Option<String>,
    table_flag: &Option<String>,
    embeddings_flag: &Option<PathBuf>,
    vocab: Option<&Vocabulary>,
) -> Result<EncoderSetup> {
    let kind_str = pick(encoder_flag, &cfg.encoder, "avg".to_string());
    let kind = parse_encoder_kind(&kind_str)?;
    let seed = cfg.seed.unwrap_or(0);
    let encoder = match kind {
        EncoderKind::Precomputed { .. } => {
            let path = embeddings_flag
                .clone()
                .or_else(|| cfg.embeddings.clone())
                .ok_or_else(|| anyhow!("--encoder precomputed needs --embeddings <file>"))?;
            let id = cfg
                .encoder_id
                .clone()
                .unwrap_or_else(|| format!("precomputed:{}", file_stem(&path)));
            let store = PrecomputedStore::load(&path, id, None)
                .with_context(|| format!("loading precomputed embeddings {}", path.display()))?;
            Encoder::precomputed(store)
        }
        kind => {
            let table_spec = table_flag
                .clone()
                .or_else(|| cfg.table.clone())
                .ok_or_else(|| anyhow!("native encoders need --table <file|random:dim[:seed]>"))?;
            let table = load_table(&table_spec, vocab, seed)?;
            Encoder::native(kind, Arc::new(table))?
        }
    };
    let encoder = match &cfg.encoder_id {
        Some(id) => encoder.with_id(id.clone()),
        None => encoder,
    };
    Ok(EncoderSetup { encoder })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".to_string())
}

fn load_corpus(
    path: &Path,
    max_len: usize,
    tok: &dyn Tokenizer,
) -> Result<Vec<RawSentence>> {
    load_sentences_with(path, max_len, tok)
        .with_context(|| format!("loading corpus {}", path.display()))
}

fn sequences_for(
    sentences: &[RawSentence],
    tok: &dyn Tokenizer,
    vocab: &Vocabulary,
) -> Result<Vec<EvalSentence>> {
    sentences
        .iter()
        .map(|s| {
            let seq = vocab.sequence(tok.tokenize(&s.text))?;
            Ok(EvalSentence {
                seq,
                line_index: s.line_index,
            })
        })
        .collect()
}

fn cmd_build_vocab(mut cfg: RunConfig, args: BuildVocabArgs) -> Result<()> {
    let corpus_path = required(&args.corpus, &cfg.corpus, "corpus")?;
    let max_len = pick(&args.max_len, &cfg.max_len, 15);
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let min_freq = pick(&args.min_freq, &cfg.min_freq, 1);
    let max_vocab = pick(&args.max_vocab, &cfg.max_vocab, 50_000);
    let tok = tokenizer_for(lowercase);
    let sentences = load_corpus(&corpus_path, max_len, &tok)?;
    let tokenized: Vec<Vec<String>> = sentences.iter().map(|s| tok.tokenize(&s.text)).collect();
    let vocab = build_vocabulary(&tokenized, min_freq, max_vocab)?;

    let out = OutDir::create(&cfg)?;
    let vocab_path = out.path("vocab.txt");
    vocab.save(&vocab_path)?;
    cfg.corpus = Some(corpus_path);
    cfg.vocab = Some(vocab_path.clone());
    cfg.max_len = Some(max_len);
    cfg.lowercase = Some(lowercase);
    cfg.min_freq = Some(min_freq);
    cfg.max_vocab = Some(max_vocab);
    out.write_config(&cfg)?;
    println!(
        "kept {} sentences; vocabulary of {} tokens written to {}",
        sentences.len(),
        vocab.len(),
        vocab_path.display()
    );
    Ok(())
}

fn cmd_encode(mut cfg: RunConfig, args: EncodeArgs) -> Result<()> {
    let corpus_path = required(&args.corpus, &cfg.corpus, "corpus")?;
    let vocab_path = required(&args.vocab, &cfg.vocab, "vocab")?;
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let tok = tokenizer_for(lowercase);
    let vocab = Vocabulary::load(&vocab_path)?;
    let setup = build_encoder(&cfg, &args.encoder, &args.table, &None, Some(&vocab))?;
    // every line is encoded so the output stays line-aligned with the corpus
    let sentences = load_corpus(&corpus_path, usize::MAX, &tok)?;
    let mut vectors = Vec::with_capacity(sentences.len());
    for s in &sentences {
        let seq = vocab.sequence(tok.tokenize(&s.text))?;
        let e = setup
            .encoder
            .encode(&seq, Some(s.line_index))
            .with_context(|| format!("encoding line {}", s.line_index))?;
        vectors.push(e.values);
    }
    let out = OutDir::create(&cfg)?;
    let name = match args.format.as_str() {
        "text" => {
            let mut buf = Vec::new();
            write_text_embeddings(&mut buf, vectors.iter().cloned())?;
            let p = out.path("embeddings.txt");
            fs::write(&p, buf)?;
            p
        }
        "binary" => {
            let mut buf = Vec::new();
            write_binary_embeddings(&mut buf, setup.encoder.dim(), &vectors)?;
            let p = out.path("embeddings.bin");
            fs::write(&p, buf)?;
            p
        }
        other => bail!("unknown format {other:?} (expected text or binary)"),
    };
    cfg.corpus = Some(corpus_path);
    cfg.vocab = Some(vocab_path);
    cfg.encoder = Some(pick(&args.encoder, &cfg.encoder, "avg".to_string()));
    cfg.table = args.table.clone().or(cfg.table);
    cfg.lowercase = Some(lowercase);
    out.write_config(&cfg)?;
    println!(
        "encoded {} sentences with {} (dim {}) into {}",
        vectors.len(),
        setup.encoder.encoder_id(),
        setup.encoder.dim(),
        name.display()
    );
    Ok(())
}

fn parse_conditioning(s: &str) -> Result<Conditioning> {
    match s {
        "concat" => Ok(Conditioning::Concat),
        "init_state" | "init-state" => Ok(Conditioning::InitState),
        other => bail!("unknown conditioning {other:?} (expected concat or init_state)"),
    }
}

fn parse_head(s: &str) -> Result<HeadKind> {
    match s {
        "softmax" => Ok(HeadKind::Softmax),
        "mos" => Ok(HeadKind::Mos),
        other => bail!("unknown head {other:?} (expected softmax or mos)"),
    }
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    let corpus_path = required(&args.corpus, &cfg.corpus, "corpus")?;
    let vocab_path = required(&args.vocab, &cfg.vocab, "vocab")?;
    let max_len = pick(&args.max_len, &cfg.max_len, 15);
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let seed = cfg.seed.unwrap_or(0);
    let tok = tokenizer_for(lowercase);
    let vocab = Vocabulary::load(&vocab_path)?;
    let setup = build_encoder(&cfg, &args.encoder, &args.table, &args.embeddings, Some(&vocab))?;

    let sentences = load_corpus(&corpus_path, max_len, &tok)?;
    let eval = sequences_for(&sentences, &tok, &vocab)?;
    let nonempty: Vec<&EvalSentence> = eval.iter().filter(|s| !s.seq.is_empty()).collect();
    if nonempty.is_empty() {
        bail!("corpus has no usable sentences after filtering to {max_len} tokens");
    }

    let conditioning = match &args.conditioning {
        Some(s) => parse_conditioning(s)?,
        None => cfg.conditioning.unwrap_or(Conditioning::Concat),
    };
    let head = match &args.head {
        Some(s) => parse_head(s)?,
        None => cfg.head.unwrap_or(HeadKind::Mos),
    };
    let config = DecoderConfig {
        vocab_size: vocab.len(),
        cond_dim: setup.encoder.dim(),
        word_dim: pick(&args.word_dim, &cfg.word_dim, 256),
        hidden_dim: pick(&args.hidden_dim, &cfg.hidden_dim, 1024),
        num_layers: pick(&args.num_layers, &cfg.num_layers, 3),
        conditioning,
        head,
        mos_components: pick(&args.mos_components, &cfg.mos_components, 5),
        max_gen_len: pick(&args.max_gen_len, &cfg.max_gen_len, 20),
    };
    let hyper = Hyperparams {
        epochs: pick(&args.epochs, &cfg.epochs, 10),
        batch_size: pick(&args.batch_size, &cfg.batch_size, 32),
        learning_rate: pick(&args.learning_rate, &cfg.learning_rate, 1e-3),
        clip_norm: pick(&args.clip_norm, &cfg.clip_norm, 5.0),
        seed,
    };

    let out = OutDir::create(&cfg)?;
    let mut model = DecoderModel::new(config, seed)?;
    let training: Vec<TokenSequence> = nonempty.iter().map(|s| s.seq.clone()).collect();
    let lines: Vec<usize> = nonempty.iter().map(|s| s.line_index).collect();
    let log_path = out.path("train_log.jsonl");
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let encoder = &setup.encoder;
    let meta = train(
        &mut model,
        |i, seq| encoder.encode(seq, Some(lines[i])),
        &training,
        &hyper,
        |rec, _| {
            let line = serde_json::to_string(rec).expect("epoch record serializes");
            let _ = writeln!(log, "{line}");
            eprintln!(
                "epoch {:>3}  loss {:.4}  ({:.1}s)",
                rec.epoch, rec.mean_loss, rec.wall_seconds
            );
            true
        },
    )?;
    let ck = DecoderCheckpoint::from_model(&model, &vocab, setup.encoder.encoder_id(), meta);
    let ck_path = out.path("checkpoint.v2s");
    ck.save(&ck_path)?;

    cfg.corpus = Some(corpus_path);
    cfg.vocab = Some(vocab_path);
    cfg.checkpoint = Some(ck_path.clone());
    cfg.encoder = Some(pick(&args.encoder, &cfg.encoder, "avg".to_string()));
    cfg.table = args.table.clone().or(cfg.table);
    cfg.max_len = Some(max_len);
    cfg.lowercase = Some(lowercase);
    cfg.word_dim = Some(model.config().word_dim);
    cfg.hidden_dim = Some(model.config().hidden_dim);
    cfg.num_layers = Some(model.config().num_layers);
    cfg.conditioning = Some(conditioning);
    cfg.head = Some(head);
    cfg.mos_components = Some(model.config().mos_components);
    cfg.max_gen_len = Some(model.config().max_gen_len);
    cfg.epochs = Some(hyper.epochs);
    cfg.batch_size = Some(hyper.batch_size);
    cfg.learning_rate = Some(hyper.learning_rate);
    cfg.clip_norm = Some(hyper.clip_norm);
    cfg.seed = Some(seed);
    out.write_config(&cfg)?;
    println!(
        "trained {} epochs on {} sentences (final loss {:.4}); checkpoint at {}",
        meta.epochs,
        meta.corpus_size,
        meta.final_loss.unwrap_or(f64::NAN),
        ck_path.display()
    );
    Ok(())
}

fn load_trained(cfg: &RunConfig, checkpoint: &Option<PathBuf>, vocab: &Option<PathBuf>) -> Result<TrainedDecoder> {
    let ck_path = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
    let vocab_path = required(vocab, &cfg.vocab, "vocab")?;
    let ck = DecoderCheckpoint::load(&ck_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    Ok(ck.into_trained(vocab)?)
}

fn cmd_generate(mut cfg: RunConfig, args: GenerateArgs) -> Result<()> {
    let trained = load_trained(&cfg, &args.checkpoint, &args.vocab)?;
    let out = OutDir::create(&cfg)?;
    let pairs_path = out.path("pairs.jsonl");
    let mut file = fs::File::create(&pairs_path)?;
    let mut count = 0usize;
    if let Some(emb_path) = args.embeddings.clone().or_else(|| cfg.embeddings.clone()) {
        let store = PrecomputedStore::load(&emb_path, trained.encoder_id(), None)?;
        for line in 0..store.len() {
            let e = store.lookup(line)?;
            let gen = algebra::decode_vector(&trained, &e.values)?;
            writeln!(
                file,
                "{}",
                serde_json::json!({ "output": gen.output.text() })
            )?;
            count += 1;
        }
        cfg.embeddings = Some(emb_path);
    } else if let Some(corpus_path) = args.corpus.clone().or_else(|| cfg.corpus.clone()) {
        let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
        let max_len = pick(&args.max_len, &cfg.max_len, 15);
        let tok = tokenizer_for(lowercase);
        let setup = build_encoder(&cfg, &args.encoder, &args.table, &None, Some(trained.vocab()))?;
        if setup.encoder.encoder_id() != trained.encoder_id() {
            eprintln!(
                "warning: checkpoint was trained with encoder {:?}, encoding with {:?}",
                trained.encoder_id(),
                setup.encoder.encoder_id()
            );
        }
        let sentences = load_corpus(&corpus_path, max_len, &tok)?;
        for s in sequences_for(&sentences, &tok, trained.vocab())? {
            if s.seq.is_empty() {
                continue;
            }
            let e = setup.encoder.encode(&s.seq, Some(s.line_index))?;
            let gen = trained.generate(&e.values)?;
            writeln!(
                file,
                "{}",
                serde_json::json!({ "input": s.seq.text(), "output": gen.output.text() })
            )?;
            count += 1;
        }
        cfg.corpus = Some(corpus_path);
    } else {
        bail!("generate needs either --embeddings or --corpus");
    }
    out.write_config(&cfg)?;
    println!("wrote {count} reconstructions to {}", pairs_path.display());
    Ok(())
}

fn cmd_diagnose(mut cfg: RunConfig, args: DiagnoseArgs) -> Result<()> {
    let trained = load_trained(&cfg, &args.checkpoint, &args.vocab)?;
    let corpus_path = required(&args.corpus, &cfg.corpus, "corpus")?;
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let max_len = pick(&args.max_len, &cfg.max_len, 15);
    let tok = tokenizer_for(lowercase);
    let setup = build_encoder(
        &cfg,
        &args.encoder,
        &args.table,
        &args.embeddings,
        Some(trained.vocab()),
    )?;
    let sentences = load_corpus(&corpus_path, max_len, &tok)?;
    let eval: Vec<EvalSentence> = sequences_for(&sentences, &tok, trained.vocab())?
        .into_iter()
        .filter(|s| !s.seq.is_empty())
        .collect();
    let scorer: Option<&crate::diagnostics::PairScorer> = match args.soft_scorer.as_deref() {
        None => None,
        Some("lexical") => Some(&lexical_overlap_f1),
        Some(other) => bail!("unknown soft scorer {other:?} (expected lexical)"),
    };
    let (report, pairs) = diagnose(&trained, &setup.encoder, &eval, scorer)?;
    let out = OutDir::create(&cfg)?;
    let mut pair_file = fs::File::create(out.path("pairs.jsonl"))?;
    write_pairs(&mut pair_file, &pairs)?;
    let json = report.to_json();
    out.write_json("report.json", &json)?;
    cfg.corpus = Some(corpus_path);
    cfg.max_len = Some(max_len);
    cfg.lowercase = Some(lowercase);
    out.write_config(&cfg)?;
    println!("{json:#}");
    Ok(())
}

fn cmd_correlate(cfg: RunConfig, args: CorrelateArgs) -> Result<()> {
    let diag = match &args.diagnostics {
        Some(p) => ScoreTable::from_csv_path(p)?,
        None => fixtures::metrics_table(),
    };
    let down = match &args.downstream {
        Some(p) => ScoreTable::from_csv_path(p)?,
        None => fixtures::downstream_table(),
    };
    let matrix = correlation_matrix(&diag, &down)?;
    let out = OutDir::create(&cfg)?;
    out.write_string("corr.csv", &matrix.to_csv_string())?;
    let summary = matrix.summary_json();
    out.write_json("summary.json", &summary)?;
    out.write_config(&cfg)?;
    print!("{}", matrix.to_csv_string());
    println!("{summary:#}");
    Ok(())
}

fn format_rank(rank: f64) -> String {
    if rank.fract() == 0.0 {
        format!("{}", rank as i64)
    } else {
        format!("{rank:.1}")
    }
}

fn cmd_rank(cfg: RunConfig, args: RankArgs) -> Result<()> {
    let table = match &args.table {
        Some(p) => ScoreTable::from_csv_path(p)?,
        None => fixtures::metrics_table(),
    };
    let ranking = if args.average {
        average_rank(&table)?.ranking
    } else {
        let row = args.by.clone().unwrap_or_else(|| "Id".to_string());
        rank_encoders(&table, &row)?
    };
    let out = OutDir::create(&cfg)?;
    let mut csv = String::from("encoder,rank\n");
    for (name, rank) in &ranking.entries {
        csv.push_str(&format!("{name},{rank}\n"));
    }
    out.write_string("ranks.csv", &csv)?;
    out.write_config(&cfg)?;
    for (name, rank) in &ranking.entries {
        println!("{} {name}", format_rank(*rank));
    }
    Ok(())
}

/// Encodes a raw sentence with the active tokenizer and vocabulary.
fn embed_sentence(
    text: &str,
    tok: &dyn Tokenizer,
    vocab: &Vocabulary,
    encoder: &Encoder,
) -> Result<SentenceEmbedding> {
    let seq = vocab.sequence(tok.tokenize(text))?;
    if seq.is_empty() {
        bail!("sentence {text:?} has no tokens");
    }
    Ok(encoder.encode(&seq, None)?)
}

fn cmd_analogy(cfg: RunConfig, args: AnalogyArgs) -> Result<()> {
    let trained = load_trained(&cfg, &args.checkpoint, &args.vocab)?;
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let tok = tokenizer_for(lowercase);
    let setup = build_encoder(&cfg, &args.encoder, &args.table, &None, Some(trained.vocab()))?;
    let records: Vec<AnalogyRecord> = if let Some(batch) = &args.batch {
        let file = fs::File::open(batch)
            .with_context(|| format!("opening batch file {}", batch.display()))?;
        let mut out = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .with_context(|| format!("batch line {i} is not an {{a, b, c}} record"))?,
            );
        }
        out
    } else {
        let a = required(&args.a, &None, "a")?;
        let b = required(&args.b, &None, "b")?;
        let c = required(&args.c, &None, "c")?;
        vec![AnalogyRecord { a, b, c }]
    };
    let out = OutDir::create(&cfg)?;
    let mut file = fs::File::create(out.path("analogies.jsonl"))?;
    for rec in &records {
        let r = embed_sentence(&rec.a, &tok, trained.vocab(), &setup.encoder)?;
        let s = embed_sentence(&rec.b, &tok, trained.vocab(), &setup.encoder)?;
        let v = embed_sentence(&rec.c, &tok, trained.vocab(), &setup.encoder)?;
        let u = algebra::analogy(&r, &s, &v)?;
        let gen = algebra::decode_vector(&trained, &u.values)?;
        let output = AnalogyOutput {
            a: rec.a.clone(),
            b: rec.b.clone(),
            c: rec.c.clone(),
            z_text: gen.output.text(),
        };
        writeln!(file, "{}", serde_json::to_string(&output)?)?;
        println!("{} - {} + {} -> {}", rec.a, rec.b, rec.c, output.z_text);
    }
    out.write_config(&cfg)?;
    Ok(())
}

fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().with_context(|| format!("bad alpha {p:?}")))
        .collect()
}

fn cmd_interpolate(cfg: RunConfig, args: InterpolateArgs) -> Result<()> {
    let trained = load_trained(&cfg, &args.checkpoint, &args.vocab)?;
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let tok = tokenizer_for(lowercase);
    let setup = build_encoder(&cfg, &args.encoder, &args.table, &None, Some(trained.vocab()))?;
    let a = required(&args.a, &None, "a")?;
    let b = required(&args.b, &None, "b")?;
    let alphas = parse_alphas(&args.alphas)?;
    let x = embed_sentence(&a, &tok, trained.vocab(), &setup.encoder)?;
    let y = embed_sentence(&b, &tok, trained.vocab(), &setup.encoder)?;
    let out = OutDir::create(&cfg)?;
    let mut file = fs::File::create(out.path("interpolations.jsonl"))?;
    for &alpha in &alphas {
        let z = algebra::interpolate(&x, &y, alpha, args.extrapolate)?;
        let gen = algebra::decode_vector(&trained, &z.values)?;
        writeln!(
            file,
            "{}",
            serde_json::json!({ "alpha": alpha, "text": gen.output.text() })
        )?;
        println!("alpha={alpha:<5} {}", gen.output.text());
    }
    out.write_config(&cfg)?;
    Ok(())
}

const REPL_HELP: &str = "\
commands:
  <sentence>                 reconstruct the sentence through the decoder
  :a <a> | <b> | <c>         decode the analogy a - b + c
  :i <a> | <b> [| alphas]    interpolation sweep (default alphas 0,0.25,0.5,0.75,1)
  :help                      show this help
  :q                         quit";

fn cmd_repl(cfg: RunConfig, args: ReplArgs) -> Result<()> {
    let trained = load_trained(&cfg, &args.checkpoint, &args.vocab)?;
    let lowercase = pick(&args.lowercase, &cfg.lowercase, true);
    let tok = tokenizer_for(lowercase);
    let setup = build_encoder(&cfg, &args.encoder, &args.table, &None, Some(trained.vocab()))?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    println!(
        "decoder for encoder {:?} loaded; type :help for commands",
        trained.encoder_id()
    );
    loop {
        print!("v2s> ");
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break; // EOF
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let result = repl_dispatch(line, &tok, &trained, &setup.encoder);
        match result {
            Ok(ReplAction::Quit) => break,
            Ok(ReplAction::Continue) => {}
            Err(e) => println!("error: {e:#}"),
        }
    }
    Ok(())
}

enum ReplAction {
    Continue,
    Quit,
}

fn repl_dispatch(
    line: &str,
    tok: &dyn Tokenizer,
    trained: &TrainedDecoder,
    encoder: &Encoder,
) -> Result<ReplAction> {
    if line == ":q" || line == ":quit" {
        return Ok(ReplAction::Quit);
    }
    if line == ":help" {
        println!("{REPL_HELP}");
        return Ok(ReplAction::Continue);
    }
    if let Some(rest) = line.strip_prefix(":a ") {
        let parts: Vec<&str> = rest.split('|').map(str::trim).collect();
        if parts.len() != 3 {
            bail!("usage: :a <a> | <b> | <c>");
        }
        let r = embed_sentence(parts[0], tok, trained.vocab(), encoder)?;
        let s = embed_sentence(parts[1], tok, trained.vocab(), encoder)?;
        let v = embed_sentence(parts[2], tok, trained.vocab(), encoder)?;
        let u = algebra::analogy(&r, &s, &v)?;
        let gen = algebra::decode_vector(trained, &u.values)?;
        println!("{}", gen.output.text());
        return Ok(ReplAction::Continue);
    }
    if let Some(rest) = line.strip_prefix(":i ") {
        let parts: Vec<&str> = rest.split('|').map(str::trim).collect();
        if parts.len() < 2 || parts.len() > 3 {
            bail!("usage: :i <a> | <b> [| alphas]");
        }
        let alphas = if parts.len() == 3 {
            parse_alphas(parts[2])?
        } else {
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        };
        let x = embed_sentence(parts[0], tok, trained.vocab(), encoder)?;
        let y = embed_sentence(parts[1], tok, trained.vocab(), encoder)?;
        for &alpha in &alphas {
            let z = algebra::interpolate(&x, &y, alpha, true)?;
            let gen = algebra::decode_vector(trained, &z.values)?;
            println!("alpha={alpha:<5} {}", gen.output.text());
        }
        return Ok(ReplAction::Continue);
    }
    let e = embed_sentence(line, tok, trained.vocab(), encoder)?;
    let gen = trained.generate(&e.values)?;
    println!("{}", gen.output.text());
    Ok(ReplAction::Continue)
}
