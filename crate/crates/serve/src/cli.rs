//! Command line: data preparation, training, evaluation, mining, ranking,
//! an interactive chat loop and the HTTP service.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use echoless::checkpoint::Checkpoint;
use echoless::encoder::{DualEncoder, EncoderConfig};
use echoless::eval::{evaluate_model, EvalSet, MetricsReport, Regime};
use echoless::mining::{mine_with_model, Fallback, StrategyKind};
use echoless::synthetic::{synthetic_splits, SyntheticConfig};
use echoless::text::{build_vocab, load_pairs, load_word_embeddings, Split, DEFAULT_MAX_LEN};
use echoless::training::{fit, EncodedPairs, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::index::{fingerprint, parse_response_pool, Candidate, ResponseIndex};
use crate::registry::ServeConfig;

#[derive(Debug, Parser)]
#[command(
    name = "echoless",
    version,
    about = "Dual-encoder response ranking that avoids echoing the input"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a context<TAB>response file and write the usable pairs.
    Ingest(IngestArgs),
    /// Write seeded synthetic train/valid/test pair files.
    Synth(SynthArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a test file; prints one TSV metrics row.
    Evaluate(EvaluateArgs),
    /// List dataset pairs a model scores within the margin of the positive.
    Mine(MineArgs),
    /// Rank a response pool for one context.
    Rank(RankArgs),
    /// Read contexts from standard input and print ranked responses.
    Chat(ChatArgs),
    /// Serve the JSON ranking API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1600)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// rn, hn_r or hn_rc.
    #[arg(long, default_value = "hn_rc")]
    pub strategy: StrategyKind,
    #[arg(long, default_value_t = 0.05)]
    pub margin: f32,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// random or skip.
    #[arg(long, default_value = "random")]
    pub fallback: Fallback,
    /// Validate every N steps; 0 validates at epoch ends only.
    #[arg(long, default_value_t = 0)]
    pub validation_every: usize,
    #[arg(long, default_value_t = 0)]
    pub offline_rounds: usize,
    #[arg(long, default_value_t = 1000)]
    pub offline_cap: usize,
    #[arg(long, default_value_t = 32)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Pretrained word vectors in word2vec text format; kept frozen.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Write the structured training log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// RN, BL, HN_r or HN_rc; defaults to the checkpoint's strategy.
    #[arg(long)]
    pub regime: Option<String>,
    /// Print a column header line first.
    #[arg(long)]
    pub header: bool,
    /// Print the report as JSON instead of TSV.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the margin the checkpoint was trained with.
    #[arg(long)]
    pub margin: Option<f32>,
    #[arg(long, default_value_t = 1000)]
    pub cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Responses, one per line or context<TAB>response.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub context: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the port from the config file.
    #[arg(long)]
    pub port: Option<u16>,
}

pub fn regime_for(strategy: StrategyKind) -> Regime {
    match strategy {
        StrategyKind::Random => Regime::Random,
        StrategyKind::HardResponses => Regime::HardResponses,
        StrategyKind::HardResponsesContexts => Regime::HardResponsesContexts,
    }
}

fn read_pool(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading pool {}", path.display()))?;
    Ok(parse_response_pool(&text))
}

/// Loads a checkpoint and indexes a pool with it.
pub fn load_index(checkpoint: &Path, pool: &Path) -> Result<(Checkpoint, ResponseIndex)> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let index = ResponseIndex::build(&ck, fingerprint(&bytes), &read_pool(pool)?)?;
    Ok((ck, index))
}

pub fn format_candidate(c: &Candidate) -> String {
    let mut line = format!("{:.4}\t{}", c.score, c.text);
    if c.echo {
        line.push_str("\t[echo]");
    }
    line
}

pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Mine(a) => mine(a, out),
        Command::Rank(a) => {
            let (ck, index) = load_index(&a.checkpoint, &a.pool)?;
            for c in index.query(&ck, &a.context, a.k)? {
                writeln!(out, "{}", format_candidate(&c))?;
            }
            Ok(())
        }
        Command::Chat(a) => chat(a, input, out),
        Command::Serve(a) => {
            let mut config = ServeConfig::load(&a.config)?;
            if let Some(port) = a.port {
                config.port = port;
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::http::serve(config))?;
            Ok(())
        }
    }
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> Result<()> {
    let (dataset, report) = load_pairs(&a.input, Split::Train)?;
    fs::write(&a.output, dataset.to_tsv()).with_context(|| format!("writing {}", a.output.display()))?;
    writeln!(
        out,
        "lines={} malformed={} empty_after_tokenization={} kept={}",
        report.lines,
        report.malformed,
        report.empty_after_tokenization,
        dataset.len()
    )?;
    Ok(())
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(&a.output_dir)?;
    let (train, valid, test) = synthetic_splits(a.seed, a.train, a.valid, a.test, &SyntheticConfig::default());
    for (name, ds) in [("train.tsv", &train), ("valid.tsv", &valid), ("test.tsv", &test)] {
        let path = a.output_dir.join(name);
        fs::write(&path, ds.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
        writeln!(out, "{}\t{}", path.display(), ds.len())?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (train_set, _) = load_pairs(&a.train, Split::Train)?;
    let (valid_set, _) = load_pairs(&a.valid, Split::Validation)?;
    let vocab = build_vocab(&train_set, a.min_count, a.max_vocab)?;
    let encoder = EncoderConfig {
        emb_dim: a.emb_dim,
        hidden: a.hidden,
        max_len: a.max_len,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = match &a.embeddings {
        Some(path) => {
            let table = load_word_embeddings(path, &vocab, a.emb_dim, &mut rng)?;
            DualEncoder::new(encoder, table, &mut rng)?
        }
        None => DualEncoder::random(encoder, vocab.len(), &mut rng)?,
    };
    let config = TrainConfig {
        batch_size: a.batch,
        margin: a.margin,
        strategy: a.strategy,
        fallback: a.fallback,
        learning_rate: a.lr,
        max_epochs: a.epochs,
        validation_every: a.validation_every,
        seed: a.seed,
        offline_rounds: a.offline_rounds,
        offline_candidate_cap: a.offline_cap,
        ..TrainConfig::default()
    };
    let outcome = fit(model, &vocab, &train_set, &valid_set, &config)?;
    outcome.best.save(&a.output)?;
    if let Some(path) = &a.log {
        let mut text = outcome.log.join("\n");
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    writeln!(
        out,
        "saved={} best_step={} validation_ap={:.4}",
        a.output.display(),
        outcome.best_step,
        outcome.best.validation_ap
    )?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (test, _) = load_pairs(&a.test, Split::Test)?;
    let regime = match &a.regime {
        Some(r) => r.parse()?,
        None => regime_for(ck.train.strategy),
    };
    let set = EvalSet::new(&test, &ck.vocab, ck.model.config.max_len)?;
    let report = evaluate_model(&ck.model, &set, regime)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        if a.header {
            writeln!(out, "{}", MetricsReport::tsv_header())?;
        }
        writeln!(out, "{}", report.to_tsv_row())?;
    }
    Ok(())
}

fn mine(a: MineArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (data, _) = load_pairs(&a.data, Split::Train)?;
    if data.is_empty() {
        bail!("{} holds no usable pairs", a.data.display());
    }
    let margin = a.margin.unwrap_or(ck.train.margin);
    let encoded = EncodedPairs::new(&data, &ck.vocab, ck.model.config.max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mined = mine_with_model(
        &ck.model,
        &encoded.contexts,
        &encoded.responses,
        &encoded.response_keys,
        margin,
        Some(a.cap),
        &mut rng,
    )?;
    let mut text = String::new();
    for p in &mined {
        let pairs = data.pairs();
        text.push_str(&format!(
            "{}\t{}\t{:.6}\n",
            pairs[p.context].context, pairs[p.response].response, p.gap
        ));
    }
    match &a.output {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            writeln!(out, "mined={} output={}", mined.len(), path.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn chat(a: ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let (ck, index) = load_index(&a.checkpoint, &a.pool)?;
    writeln!(out, "{} responses loaded; empty line or ctrl-d quits", index.len())?;
    let mut line = String::new();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let context = line.trim();
        if context.is_empty() {
            break;
        }
        match index.query(&ck, context, a.k) {
            Ok(cands) => {
                for c in cands {
                    writeln!(out, "  {}", format_candidate(&c))?;
                }
            }
            Err(e) => writeln!(out, "  error: {e}")?,
        }
    }
    Ok(())
}
