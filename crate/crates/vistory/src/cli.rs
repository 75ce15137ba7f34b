//! Command-line surface. Exit codes: 0 success, 1 user error (bad flags,
//! inputs or a failed check), 2 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vistory_core::data::SplitName;
use vistory_core::decoding::{DecodeConfig, Strategy};
use vistory_core::encoder::EncoderStub;
use vistory_core::lm::LmConfig;
use vistory_core::mapping::ContextMode;
use vistory_core::metrics::EvalOptions;
use vistory_core::training::{mapping_gradcheck_suite, suite_options, PretrainConfig, TrainConfig, TrainEvent};

use crate::checkpoint::{load_lm, load_model, save_lm, save_model, CheckpointError};
use crate::config::{ConfigError, ConfigFile};
use crate::formats::{read_jsonl, report_json, report_table, DecodeEcho, EpochLine, FormatError, GenerationLine, JsonlWriter, StepLine};
use crate::pipeline::{self, SynthOptions};

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "VISTORY_DATA";

#[derive(Debug, Parser)]
#[command(name = "vistory", version, about = "Prefix-tuned visual storytelling on a frozen language model")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic toy dataset and aligned image features.
    SynthData(SynthArgs),
    /// Train the frozen language model on the training split.
    PretrainLm(PretrainArgs),
    /// Train the mapping network in front of a frozen language model.
    Train(TrainArgs),
    /// Narrate every story of a split.
    Generate(GenerateArgs),
    /// Score generated stories.
    Eval(EvalArgs),
    /// Finite-difference check of the mapping-network gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = DATA_ENV)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub albums: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f32,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub warmup_steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Frozen language-model checkpoint from `pretrain-lm`.
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch JSON Lines log.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Per-step JSON Lines log.
    #[arg(long)]
    pub steps_log: Option<PathBuf>,
    /// Image features; defaults to features.jsonl in the data directory.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_nll: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub include_positive: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// none, before or after.
    #[arg(long)]
    pub context_mode: Option<String>,
    /// Number of previous sentences used as context.
    #[arg(long = "l")]
    pub context_sentences: Option<usize>,
    /// Train on SIS only instead of alternating DII and SIS.
    #[arg(long)]
    pub no_curriculum: bool,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 10)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 2)]
    pub mapping_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub mapping_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub mlp_ratio: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// beam, top_k, nucleus or simctg.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub num_beams: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub simctg_k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub length_normalize: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Context mode; defaults to the one the model was trained with.
    #[arg(long)]
    pub context_mode: Option<String>,
    #[arg(long = "l")]
    pub context_sentences: Option<usize>,
    /// Narrate only the first N stories.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output of `generate`.
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Also print an aligned text table.
    #[arg(long)]
    pub table: bool,
    /// Pool n-grams over the whole corpus.
    #[arg(long)]
    pub pooled: bool,
    /// Count n-grams across sentence boundaries.
    #[arg(long)]
    pub bridge_sentences: bool,
    #[arg(long)]
    pub no_perplexity: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Use the full mapping-network depth and head count.
    #[arg(long)]
    pub paper_shape: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Raised for inputs and checks the user can fix.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Maps an error chain to an exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    use vistory_core::Error as E;
    for cause in e.chain() {
        if cause.is::<UserError>() || cause.is::<ConfigError>() || cause.is::<FormatError>() || cause.is::<CheckpointError>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::ShapeMismatch { .. } | E::InvalidShape { .. } | E::NonScalarLoss(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
    }
    2
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth(a),
        Command::PretrainLm(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let raw = pipeline::synth_data(&a.out, &SynthOptions { seed: a.seed, albums: a.albums, noise: a.noise })?;
    let count = |s: SplitName| (raw.split(s).sis.len(), raw.split(s).dii.len());
    for s in SplitName::ALL {
        let (sis, dii) = count(s);
        println!("{}: {sis} stories, {dii} captions", s.as_str());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let raw = crate::formats::load_dataset(&a.data)?;
    let shape = LmConfig {
        vocab_size: 0,
        embed_dim: a.embed_dim,
        n_layers: a.layers,
        n_heads: a.heads,
        max_positions: a.max_positions,
    };
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_steps: a.warmup_steps,
        weight_decay: 0.0,
        seed: a.seed,
    };
    let (lm, vocab, _) = pipeline::pretrain(&raw, shape, &cfg, &mut |e, loss| println!("epoch {e}: loss {loss:.4}"))?;
    save_lm(&a.out, &lm, &vocab)?;
    println!("wrote {} ({} words, checksum {})", a.out.display(), vocab.len(), pipeline::hex(&vistory_core::HasParams::params(&lm).checksum()));
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(p) = path else { return Ok(ConfigFile::default()) };
    let f = ConfigFile::load(p).with_context(|| format!("reading {}", p.display()))?;
    f.check_keys()?;
    Ok(f)
}

fn parse_mode(s: &str) -> Result<ContextMode> {
    ContextMode::parse(s).ok_or_else(|| user(format!("unknown context mode `{s}` (expected none, before or after)")))
}

fn override_opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Training configuration from file and flags.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    load_config(a.config.as_deref())?.apply_train(&mut c)?;
    override_opt(&mut c.epochs, a.epochs);
    override_opt(&mut c.batch_size, a.batch_size);
    override_opt(&mut c.n_nll, a.n_nll);
    override_opt(&mut c.lambda, a.lambda);
    override_opt(&mut c.tau, a.tau);
    override_opt(&mut c.lr, a.lr);
    override_opt(&mut c.weight_decay, a.weight_decay);
    override_opt(&mut c.warmup_steps, a.warmup_steps);
    override_opt(&mut c.context_sentences, a.context_sentences);
    override_opt(&mut c.patience, a.patience);
    override_opt(&mut c.min_delta, a.min_delta);
    override_opt(&mut c.max_len, a.max_len);
    override_opt(&mut c.seed, a.seed);
    if let Some(m) = &a.context_mode {
        c.context_mode = parse_mode(m)?;
    }
    if a.include_positive {
        c.include_positive_in_denominator = true;
    }
    if a.no_curriculum {
        c.curriculum = false;
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let (lm, vocab) = load_lm(&a.lm)?;
    let data = pipeline::load_tokenized(&a.data, &vocab)?;
    let encoder = EncoderStub::new(pipeline::toy_encoder_config());
    let table = pipeline::find_features(&a.data, a.features.as_deref(), &encoder)?;
    let features = pipeline::feature_source(&encoder, table.as_ref());
    let mapping = vistory_core::mapping::MappingConfig {
        d_feat: encoder.d_feat(),
        d_model: lm.config().embed_dim,
        prefix_len: a.prefix_len,
        clip_len: a.clip_len,
        n_layers: a.mapping_layers,
        n_heads: a.mapping_heads,
        mlp_ratio: a.mlp_ratio,
    };
    let lm_sum = vistory_core::HasParams::params(&lm).checksum();
    let mut epochs = a.metrics.as_deref().map(JsonlWriter::create).transpose()?;
    let mut steps = a.steps_log.as_deref().map(JsonlWriter::create).transpose()?;
    let mut failure: Option<FormatError> = None;
    let (saved, report) = pipeline::train_model(lm, &vocab, mapping, &cfg, &data, &features, &mut |ev| {
        let r = match ev {
            TrainEvent::Step(s) => steps.as_mut().map(|w| w.write(&StepLine::from(s))),
            TrainEvent::Epoch(e) => {
                println!(
                    "epoch {} [{}] nll {:.4} combined {:.4} val {}",
                    e.epoch,
                    e.phase.as_str(),
                    e.nll,
                    e.combined,
                    e.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
                );
                epochs.as_mut().map(|w| w.write(&EpochLine::from(e)))
            }
        };
        if let Some(Err(e)) = r {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    for w in [epochs, steps].into_iter().flatten() {
        w.finish()?;
    }
    if vistory_core::HasParams::params(&saved.model.lm).checksum() != lm_sum {
        anyhow::bail!("language model changed during training");
    }
    save_model(&a.out, &saved)?;
    if let Some(c) = &report.curriculum {
        let seq: Vec<&str> = c.phase_sequence().iter().map(|p| p.as_str()).collect();
        println!("curriculum: {}", seq.join(" -> "));
    }
    println!("wrote {} after {} steps ({} skipped)", a.out.display(), report.steps.len(), report.skipped_steps);
    Ok(())
}

/// Decoding configuration from file and flags.
pub fn decode_config(file: &ConfigFile, a: &DecodeArgs) -> Result<DecodeConfig> {
    let mut c = DecodeConfig::default();
    file.apply_decode(&mut c)?;
    if let Some(s) = &a.strategy {
        c.strategy = Strategy::parse(s).ok_or_else(|| user(format!("unknown strategy `{s}` (expected beam, top_k, nucleus or simctg)")))?;
    }
    override_opt(&mut c.max_len, a.max_len);
    override_opt(&mut c.num_beams, a.num_beams);
    override_opt(&mut c.k, a.k);
    override_opt(&mut c.p, a.p);
    override_opt(&mut c.simctg_k, a.simctg_k);
    override_opt(&mut c.alpha, a.alpha);
    override_opt(&mut c.temperature, a.temperature);
    override_opt(&mut c.seed, a.seed);
    if a.length_normalize {
        c.length_normalize = true;
    }
    c.validate()?;
    Ok(c)
}

fn parse_split(s: &str) -> Result<SplitName> {
    SplitName::parse(s).ok_or_else(|| user(format!("unknown split `{s}` (expected train, val or test)")))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let cfg = decode_config(&file, &a.decode)?;
    let split = parse_split(&a.split)?;
    let saved = load_model(&a.model)?;
    let mode = match &a.context_mode {
        Some(m) => parse_mode(m)?,
        None => saved.context_mode,
    };
    let l = a.context_sentences.unwrap_or(saved.context_sentences);
    let data = pipeline::load_tokenized(&a.data, &saved.vocab)?;
    let encoder = EncoderStub::new(saved.encoder.clone());
    let table = pipeline::find_features(&a.data, a.features.as_deref(), &encoder)?;
    let features = pipeline::feature_source(&encoder, table.as_ref());
    let stories = pipeline::generate_split(&saved, &data, split, &features, &cfg, mode, l, a.limit)?;
    pipeline::write_generations(&a.out, &stories, &saved.vocab, &DecodeEcho::new(&cfg, mode, l))?;
    println!("wrote {} stories to {}", stories.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let saved = load_model(&a.model)?;
    let lines: Vec<GenerationLine> = read_jsonl(&a.generations)?;
    let stories = lines
        .iter()
        .map(|l| l.to_story(&saved.vocab).map_err(user))
        .collect::<Result<Vec<_>>>()?;
    let encoder = EncoderStub::new(saved.encoder.clone());
    let table = pipeline::find_features(&a.data, a.features.as_deref(), &encoder)?;
    let features = pipeline::feature_source(&encoder, table.as_ref());
    let opts = EvalOptions { bridge_sentences: a.bridge_sentences, pooled: a.pooled };
    let report = pipeline::evaluate(&stories, &saved, &features, !a.no_perplexity, &opts)?;
    let json = report_json(&report);
    match &a.out {
        Some(p) => std::fs::write(p, format!("{json}\n")).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if a.table {
        let label = lines.first().map_or("", |l| l.strategy.as_str());
        print!("{}", report_table(label, &report));
    }
    if report.aggregate.skipped_pairs > 0 {
        eprintln!("warning: {} sentence-image pairs had no feature and were skipped", report.aggregate.skipped_pairs);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let cases = mapping_gradcheck_suite(a.paper_shape, &suite_options(a.seed))?;
    let mut worst: f64 = 0.0;
    let mut out = std::io::stdout().lock();
    for c in &cases {
        writeln!(out, "{:<28} max relative error {:.3e} over {} coordinates", c.name, c.report.max_relative_error, c.report.checked)?;
        if !c.report.non_finite.is_empty() {
            writeln!(out, "  non-finite evaluations: {:?}", c.report.non_finite)?;
        }
        worst = worst.max(if c.report.non_finite.is_empty() { c.report.max_relative_error } else { f64::INFINITY });
    }
    writeln!(out, "max relative error {worst:.3e} (tolerance {:.0e}) in {:.1}s", a.tolerance, start.elapsed().as_secs_f64())?;
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(user(format!("gradient check failed: {worst:.3e} >= {:.0e}", a.tolerance)))
    }
}
