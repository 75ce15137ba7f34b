//! End-to-end steps shared by the command-line tool and the tests:
//! synthesize, pretrain, train, generate, evaluate.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use vistory_core::data::{aligned_feature_table, synthesize_toy_dataset, DatasetSplits, RawSplits, SplitName};
use vistory_core::decoding::{generate_story, DecodeConfig, GeneratedStory, StoryInput};
use vistory_core::encoder::{EncoderConfig, EncoderStub, FeatureSource, FeatureTable};
use vistory_core::lm::{LanguageModel, LmConfig};
use vistory_core::mapping::{ContextMode, MappingConfig, MappingNetwork, PrefixModel};
use vistory_core::metrics::{corpus_eval, EvalOptions, MetricReport};
use vistory_core::tokenizer::Vocab;
use vistory_core::training::{pretrain_lm, train, PretrainConfig, TrainConfig, TrainEvent, TrainReport};

use crate::checkpoint::SavedModel;
use crate::formats::{load_dataset, load_features, save_dataset, save_features, DecodeEcho, GenerationLine, JsonlWriter};

/// Name of the feature file written next to a synthesized dataset.
pub const FEATURES_FILE: &str = "features.jsonl";

/// Encoder used for every toy dataset and model.
pub fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig::default()
}

/// Language-model shape used by `pretrain-lm` unless overridden.
pub fn toy_lm_config(vocab_size: usize) -> LmConfig {
    LmConfig {
        vocab_size,
        embed_dim: 32,
        n_layers: 2,
        n_heads: 4,
        max_positions: 64,
    }
}

/// Mapping-network shape for a language model of width `d_model`.
pub fn toy_mapping_config(d_feat: usize, d_model: usize) -> MappingConfig {
    MappingConfig {
        d_feat,
        d_model,
        prefix_len: 10,
        clip_len: 10,
        n_layers: 2,
        n_heads: 4,
        mlp_ratio: 2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub albums: usize,
    /// Weight of the per-image random direction mixed into each feature.
    pub noise: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { seed: 0, albums: 64, noise: 0.5 }
    }
}

/// Toy dataset plus aligned features, in memory.
pub fn synthesize(opts: &SynthOptions) -> Result<(RawSplits, FeatureTable)> {
    let raw = synthesize_toy_dataset(opts.seed, opts.albums)?;
    let vocab = raw.build_vocab();
    let encoder = EncoderStub::new(toy_encoder_config());
    let table = aligned_feature_table(&raw, &vocab, &encoder, opts.noise, opts.seed)?;
    Ok((raw, table))
}

/// Writes a toy dataset and its feature file into `dir`.
pub fn synth_data(dir: &Path, opts: &SynthOptions) -> Result<RawSplits> {
    let (raw, table) = synthesize(opts)?;
    save_dataset(dir, &raw)?;
    save_features(&dir.join(FEATURES_FILE), &table)?;
    Ok(raw)
}

/// Every training-split text, tokenized, for language-model pretraining.
pub fn pretraining_sentences(raw: &RawSplits, vocab: &Vocab) -> Vec<Vec<u32>> {
    raw.training_texts().map(|t| vocab.encode(t).0).filter(|s| !s.is_empty()).collect()
}

/// Builds the vocabulary from the training split and pretrains a frozen LM
/// on it. `shape` supplies everything but the vocabulary size.
pub fn pretrain(raw: &RawSplits, shape: LmConfig, cfg: &PretrainConfig, observe: &mut dyn FnMut(usize, f64)) -> Result<(LanguageModel, Vocab, Vec<f64>)> {
    let vocab = raw.build_vocab();
    let config = LmConfig { vocab_size: vocab.len(), ..shape };
    let sentences = pretraining_sentences(raw, &vocab);
    let (lm, losses) = pretrain_lm(config, &sentences, cfg, observe)?;
    Ok((lm, vocab, losses))
}

/// Feature table from `path`, or from `<data>/features.jsonl` when present.
/// `None` means images fall back to synthetic features.
pub fn find_features(data_dir: &Path, path: Option<&Path>, encoder: &EncoderStub) -> Result<Option<FeatureTable>> {
    let p: PathBuf = match path {
        Some(p) => p.into(),
        None => data_dir.join(FEATURES_FILE),
    };
    if !p.exists() {
        if path.is_some() {
            anyhow::bail!("feature file {} does not exist", p.display());
        }
        log::warn!("no {} in {}; using synthetic image features", FEATURES_FILE, data_dir.display());
        return Ok(None);
    }
    Ok(Some(load_features(&p, encoder.d_feat())?))
}

pub fn feature_source<'a>(encoder: &'a EncoderStub, table: Option<&'a FeatureTable>) -> FeatureSource<'a> {
    match table {
        Some(t) => FeatureSource::with_table(encoder, t, false),
        None => FeatureSource::synthetic(encoder),
    }
}

/// Loads and tokenizes a dataset directory with `vocab`.
pub fn load_tokenized(data_dir: &Path, vocab: &Vocab) -> Result<DatasetSplits> {
    let raw = load_dataset(data_dir)?;
    Ok(raw.tokenize(vocab)?)
}

/// Trains a fresh mapping network in front of `lm`.
pub fn train_model(
    lm: LanguageModel,
    vocab: &Vocab,
    mapping: MappingConfig,
    cfg: &TrainConfig,
    data: &DatasetSplits,
    features: &FeatureSource,
    observe: &mut dyn FnMut(&TrainEvent),
) -> Result<(SavedModel, TrainReport)> {
    let encoder_config = features.encoder.config().clone();
    let net = MappingNetwork::new(mapping, cfg.seed)?;
    let mut model = PrefixModel::new(lm, net)?;
    let report = train(cfg, &mut model, data, features.encoder, features, observe)?;
    Ok((
        SavedModel {
            model,
            vocab: vocab.clone(),
            encoder: encoder_config,
            context_mode: cfg.context_mode,
            context_sentences: cfg.context_sentences,
        },
        report,
    ))
}

/// Narrates every story of `split` in file order.
pub fn generate_split(
    saved: &SavedModel,
    data: &DatasetSplits,
    split: SplitName,
    features: &FeatureSource,
    cfg: &DecodeConfig,
    mode: ContextMode,
    l: usize,
    limit: Option<usize>,
) -> Result<Vec<GeneratedStory>> {
    let stories = &data.split(split).sis;
    let n = limit.unwrap_or(stories.len()).min(stories.len());
    stories[..n]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ctx = s.album_context();
            let input = StoryInput { sequence_id: &s.album_id, image_ids: &s.image_ids, album_context: &ctx };
            generate_story(&saved.model, features.encoder, features, &input, cfg, mode, l, i as u64)
                .with_context(|| format!("generating story {}", s.album_id))
        })
        .collect()
}

pub fn write_generations(path: &Path, stories: &[GeneratedStory], vocab: &Vocab, echo: &DecodeEcho) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for s in stories {
        w.write(&GenerationLine::new(s, vocab, echo))?;
    }
    w.finish()?;
    Ok(())
}

pub fn evaluate(stories: &[GeneratedStory], saved: &SavedModel, features: &FeatureSource, perplexity: bool, opts: &EvalOptions) -> Result<MetricReport> {
    let lm = perplexity.then_some(&saved.model.lm);
    Ok(corpus_eval(stories, features.encoder, features, lm, opts)?)
}

/// Lowercase hex of a digest.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
