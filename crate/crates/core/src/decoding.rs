//! Beam search, top-k and nucleus sampling, contrastive search, and the
//! story loop that feeds predicted sentences forward as context.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::cmp::Ordering;

use num_traits::Float;
use rand::Rng as _;

use crate::autodiff::Graph;
use crate::encoder::{cosine, EncoderStub, FeatureSource};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::mapping::{ContextMode, PrefixModel, PromptContext};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, EOS};
use crate::training::sentence_context;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Beam,
    TopK,
    Nucleus,
    Simctg,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "beam" => Some(Self::Beam),
            "top_k" | "top-k" | "topk" => Some(Self::TopK),
            "nucleus" | "top_p" => Some(Self::Nucleus),
            "simctg" | "contrastive" => Some(Self::Simctg),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Beam => "beam",
            Self::TopK => "top_k",
            Self::Nucleus => "nucleus",
            Self::Simctg => "simctg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Maximum generated tokens per sentence, EOS included.
    pub max_len: usize,
    pub num_beams: usize,
    pub k: usize,
    pub p: f64,
    pub simctg_k: usize,
    pub alpha: f64,
    /// Applied to the logits of the sampling strategies only.
    pub temperature: f64,
    pub seed: u64,
    /// Rank finished beams by mean instead of summed log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            max_len: 30,
            num_beams: 5,
            k: 50,
            p: 0.9,
            simctg_k: 5,
            alpha: 0.8,
            temperature: 1.0,
            seed: 0,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p > 0.0
            && self.p <= 1.0
            && self.k >= 1
            && self.num_beams >= 1
            && self.simctg_k >= 1
            && (0.0..=1.0).contains(&self.alpha)
            && self.max_len >= 1
            && self.temperature > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid decoding configuration: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    Length,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Eos => "eos",
            Self::Length => "length",
        }
    }
}

/// A decoded sentence, without its EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    pub score: f64,
}

/// Output of one forward pass over the prompt plus the generated tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Next-token logits at the last position.
    pub logits: Vec<f32>,
    /// Final-layer hidden states of every position.
    pub hidden: Tensor,
}

/// Anything that scores the next token given the tokens generated so far.
pub trait DecodeModel {
    fn vocab_size(&self) -> usize;
    fn forward(&self, generated: &[u32]) -> Result<ModelOutput>;

    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f32>> {
        Ok(self.forward(generated)?.logits)
    }
}

/// The frozen language model behind fixed prompt rows.
pub struct PromptedLm<'m> {
    pub lm: &'m LanguageModel,
    pub prompt: &'m Tensor,
}

impl DecodeModel for PromptedLm<'_> {
    fn vocab_size(&self) -> usize {
        self.lm.config().vocab_size
    }

    fn forward(&self, generated: &[u32]) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let mut x = g.constant(self.prompt);
        if !generated.is_empty() {
            let t = self.lm.token_rows(&mut g, generated)?;
            x = g.concat_rows(&[x, t])?;
        }
        let h = self.lm.forward(&mut g, x)?;
        let n = g.value(h).rows();
        let last = g.slice_rows(h, n - 1, 1)?;
        let logits = self.lm.logits(&mut g, last)?;
        Ok(ModelOutput {
            logits: g.value(logits).data().to_vec(),
            hidden: g.value(h).clone(),
        })
    }
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let z: f64 = logits.iter().map(|&v| Float::exp(v as f64 - m)).sum();
    let lz = Float::ln(z);
    logits.iter().map(|&v| v as f64 - m - lz).collect()
}

pub fn softmax_with_temperature(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f32> = logits.iter().map(|&v| (v as f64 / temperature) as f32).collect();
    log_softmax(&scaled).into_iter().map(Float::exp).collect()
}

/// Token ids by descending probability, ties broken by lower id.
pub fn rank_order(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// The `k` most probable ids, most probable first.
pub fn top_k_candidates(probs: &[f64], k: usize) -> Vec<usize> {
    let mut r = rank_order(probs);
    r.truncate(k.max(1));
    r
}

/// The shortest most-probable-first prefix whose mass reaches `p`; the
/// argmax is always included.
pub fn nucleus_candidates(probs: &[f64], p: f64) -> Vec<usize> {
    let r = rank_order(probs);
    let mut mass = 0.0;
    let mut out = Vec::new();
    for id in r {
        out.push(id);
        mass += probs[id];
        if mass >= p {
            break;
        }
    }
    out
}

/// Draws from `probs` restricted to `candidates` and renormalized.
pub fn sample_candidate(probs: &[f64], candidates: &[usize], rng: &mut rng::Rng) -> usize {
    let mass: f64 = candidates.iter().map(|&c| probs[c]).sum();
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &c in candidates {
        acc += probs[c];
        if u < acc {
            return c;
        }
    }
    *candidates.last().expect("non-empty candidate set")
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<M: DecodeModel + ?Sized>(m: &M, max_len: usize) -> Result<Decoded> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let logits = m.next_logits(&tokens)?;
        let v = argmax(&logits);
        score += log_softmax(&logits)[v];
        if v as u32 == EOS {
            return Ok(Decoded {
                tokens,
                stop: StopReason::Eos,
                score,
            });
        }
        tokens.push(v as u32);
    }
    Ok(Decoded {
        tokens,
        stop: StopReason::Length,
        score,
    })
}

fn by_score_then_tokens(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam search over summed log-probabilities. Hypotheses that emit EOS are
/// set aside; the best finished one wins, or the best live one when none
/// finished within `max_len`.
pub fn beam_search<M: DecodeModel + ?Sized>(m: &M, cfg: &DecodeConfig) -> Result<Decoded> {
    let width = cfg.num_beams.max(1);
    let norm = |seq: &[u32], score: f64, finished: bool| {
        if cfg.length_normalize {
            score / (seq.len() + finished as usize).max(1) as f64
        } else {
            score
        }
    };
    let mut live: Vec<(Vec<u32>, f64)> = alloc::vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands: Vec<(Vec<u32>, f64)> = Vec::with_capacity(live.len() * m.vocab_size());
        for (seq, score) in &live {
            let lp = log_softmax(&m.next_logits(seq)?);
            for (v, l) in lp.into_iter().enumerate() {
                let mut s = seq.clone();
                s.push(v as u32);
                cands.push((s, score + l));
            }
        }
        cands.sort_by(by_score_then_tokens);
        let mut next = Vec::with_capacity(width);
        for (mut seq, score) in cands {
            if *seq.last().unwrap() == EOS {
                seq.pop();
                let s = norm(&seq, score, true);
                finished.push((seq, s));
            } else {
                next.push((seq, score));
                if next.len() == width {
                    break;
                }
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if !cfg.length_normalize {
            let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            // scores only decrease, so no live beam can overtake
            if best_done >= live[0].1 {
                break;
            }
        }
    }
    if !finished.is_empty() {
        finished.sort_by(by_score_then_tokens);
        let (tokens, score) = finished.swap_remove(0);
        return Ok(Decoded {
            tokens,
            stop: StopReason::Eos,
            score,
        });
    }
    let mut live: Vec<(Vec<u32>, f64)> = live.into_iter().map(|(s, sc)| {
        let n = norm(&s, sc, false);
        (s, n)
    }).collect();
    live.sort_by(by_score_then_tokens);
    let (tokens, score) = live.swap_remove(0);
    Ok(Decoded {
        tokens,
        stop: StopReason::Length,
        score,
    })
}

/// Top-k (`nucleus == false`) or nucleus sampling. Draw `t` uses the
/// counter-based stream `(seed, stream, t)`.
pub fn sample<M: DecodeModel + ?Sized>(m: &M, cfg: &DecodeConfig, nucleus: bool, stream: u64) -> Result<Decoded> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for t in 0..cfg.max_len {
        let logits = m.next_logits(&tokens)?;
        let probs = softmax_with_temperature(&logits, cfg.temperature);
        let cands = if nucleus {
            nucleus_candidates(&probs, cfg.p)
        } else {
            top_k_candidates(&probs, cfg.k)
        };
        let mut r = rng::keyed(cfg.seed, stream, t as u64);
        let v = sample_candidate(&probs, &cands, &mut r);
        score += Float::ln(probs[v]);
        if v as u32 == EOS {
            return Ok(Decoded {
                tokens,
                stop: StopReason::Eos,
                score,
            });
        }
        tokens.push(v as u32);
    }
    Ok(Decoded {
        tokens,
        stop: StopReason::Length,
        score,
    })
}

/// Contrastive search: among the `simctg_k` most probable tokens pick the
/// one maximizing `(1 - alpha) * p - alpha * max_j cos(h_v, h_j)` over all
/// previous positions `j`.
pub fn contrastive_search<M: DecodeModel + ?Sized>(m: &M, cfg: &DecodeConfig) -> Result<Decoded> {
    let mut tokens: Vec<u32> = Vec::new();
    let mut out = m.forward(&tokens)?;
    let mut score = 0.0;
    for _ in 0..cfg.max_len {
        let probs = softmax_with_temperature(&out.logits, 1.0);
        let mut best: Option<(f64, usize, ModelOutput)> = None;
        for v in top_k_candidates(&probs, cfg.simctg_k) {
            tokens.push(v as u32);
            let look = m.forward(&tokens)?;
            tokens.pop();
            let h_v = look.hidden.row(look.hidden.rows() - 1);
            let penalty = (0..out.hidden.rows())
                .map(|j| cosine(h_v, out.hidden.row(j)) as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let s = (1.0 - cfg.alpha) * probs[v] - cfg.alpha * penalty;
            let better = match &best {
                None => true,
                Some((bs, bv, _)) => s > *bs || (s == *bs && v < *bv),
            };
            if better {
                best = Some((s, v, look));
            }
        }
        let (_, v, look) = best.expect("at least one candidate");
        score += Float::ln(probs[v]);
        if v as u32 == EOS {
            return Ok(Decoded {
                tokens,
                stop: StopReason::Eos,
                score,
            });
        }
        tokens.push(v as u32);
        out = look;
    }
    Ok(Decoded {
        tokens,
        stop: StopReason::Length,
        score,
    })
}

/// Runs the configured strategy; `stream` keys the sampling draws.
pub fn decode<M: DecodeModel + ?Sized>(m: &M, cfg: &DecodeConfig, stream: u64) -> Result<Decoded> {
    match cfg.strategy {
        Strategy::Beam => beam_search(m, cfg),
        Strategy::TopK => sample(m, cfg, false, stream),
        Strategy::Nucleus => sample(m, cfg, true, stream),
        Strategy::Simctg => contrastive_search(m, cfg),
    }
}

/// One image sequence to narrate.
#[derive(Clone, Debug)]
pub struct StoryInput<'s> {
    pub sequence_id: &'s str,
    pub image_ids: &'s [String],
    /// Title and description tokens, the context of the first sentence.
    pub album_context: &'s [u32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceTrace {
    pub image_id: String,
    pub strategy: Strategy,
    pub stop: StopReason,
    /// Context tokens the sentence was conditioned on (empty in `none` mode).
    pub context_tokens: Vec<u32>,
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedStory {
    pub sequence_id: String,
    pub sentences: Vec<TokenSequence>,
    pub trace: Vec<SentenceTrace>,
}

/// Narrates `story` image by image. Sentence `i` conditions on image `i`
/// and on the last `min(i, l)` predicted sentences (the album title and
/// description for the first one).
pub fn generate_story(
    model: &PrefixModel,
    encoder: &EncoderStub,
    features: &FeatureSource,
    story: &StoryInput,
    cfg: &DecodeConfig,
    mode: ContextMode,
    l: usize,
    sequence_index: u64,
) -> Result<GeneratedStory> {
    cfg.validate()?;
    if story.image_ids.is_empty() {
        return Err(Error::Dataset(format!("sequence {} has no images", story.sequence_id)));
    }
    let max_rows = model.lm.config().max_positions.saturating_sub(cfg.max_len);
    let mut previous: Vec<Vec<u32>> = Vec::new();
    let mut out = GeneratedStory {
        sequence_id: story.sequence_id.into(),
        sentences: Vec::new(),
        trace: Vec::new(),
    };
    for (i, image_id) in story.image_ids.iter().enumerate() {
        let image = features.image(image_id)?;
        let context_tokens = match mode {
            ContextMode::None => Vec::new(),
            _ => sentence_context(story.album_context, &previous, l),
        };
        let context_feature = encoder.encode_text(&context_tokens);
        let ctx = match mode {
            ContextMode::None => PromptContext::None,
            ContextMode::Before => PromptContext::Before(&context_feature),
            ContextMode::After => PromptContext::After(&context_tokens),
        };
        let (prompt, truncated) = model.mapping.prefix_sequence(&model.lm, &image, ctx, max_rows)?;
        let runner = PromptedLm {
            lm: &model.lm,
            prompt: &prompt.vectors,
        };
        let d = decode(&runner, cfg, (sequence_index << 8) | i as u64)?;
        previous.push(d.tokens.clone());
        out.sentences.push(TokenSequence(d.tokens));
        out.trace.push(SentenceTrace {
            image_id: image_id.clone(),
            strategy: cfg.strategy,
            stop: d.stop,
            context_tokens,
            truncated,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use super::Strategy;

    /// Deterministic random next-token model: logits and hidden rows are
    /// pure functions of the token history.
    struct RandomModel {
        seed: u64,
        vocab: usize,
        dim: usize,
        shift: f32,
    }

    impl RandomModel {
        fn new(seed: u64, vocab: usize) -> Self {
            Self {
                seed,
                vocab,
                dim: 4,
                shift: 0.0,
            }
        }

        fn stream(&self, history: &[u32], tag: u8) -> rng::Rng {
            let mut label: Vec<u8> = history.iter().flat_map(|t| t.to_le_bytes()).collect();
            label.push(tag);
            rng::labeled(self.seed, &label)
        }
    }

    impl DecodeModel for RandomModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn forward(&self, generated: &[u32]) -> Result<ModelOutput> {
            let logits = rng::gaussian_vec(&mut self.stream(generated, 0), self.vocab, 2.0)
                .into_iter()
                .map(|v| v as f32 + self.shift)
                .collect();
            let rows: Vec<Vec<f32>> = (0..=generated.len())
                .map(|i| {
                    rng::gaussian_vec(&mut self.stream(&generated[..i], 1), self.dim, 1.0)
                        .into_iter()
                        .map(|v| v as f32)
                        .collect()
                })
                .collect();
            let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
            Ok(ModelOutput {
                logits,
                hidden: Tensor::from_rows(&refs)?,
            })
        }
    }

    /// Best EOS-terminated sequence of at most `max_len` tokens by
    /// exhaustive enumeration, or the best full-length one when no
    /// sequence can finish.
    fn exhaustive(m: &RandomModel, max_len: usize) -> Decoded {
        fn walk(m: &RandomModel, seq: &mut Vec<u32>, score: f64, max_len: usize, done: &mut Vec<(Vec<u32>, f64)>, capped: &mut Vec<(Vec<u32>, f64)>) {
            let lp = log_softmax(&m.next_logits(seq).unwrap());
            for v in 0..m.vocab {
                let s = score + lp[v];
                if v as u32 == EOS {
                    done.push((seq.clone(), s));
                } else {
                    seq.push(v as u32);
                    if seq.len() == max_len {
                        capped.push((seq.clone(), s));
                    } else {
                        walk(m, seq, s, max_len, done, capped);
                    }
                    seq.pop();
                }
            }
        }
        let (mut done, mut capped) = (Vec::new(), Vec::new());
        walk(m, &mut Vec::new(), 0.0, max_len, &mut done, &mut capped);
        let best = |v: &mut Vec<(Vec<u32>, f64)>| {
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            v[0].clone()
        };
        if done.is_empty() {
            let (tokens, score) = best(&mut capped);
            Decoded { tokens, stop: StopReason::Length, score }
        } else {
            let (tokens, score) = best(&mut done);
            Decoded { tokens, stop: StopReason::Eos, score }
        }
    }

    #[test]
    fn full_width_beam_equals_exhaustive_search() {
        let mut r = rng::seeded(42);
        for trial in 0..20 {
            let vocab = r.random_range(3..=6);
            let max_len = r.random_range(1..=4);
            let m = RandomModel::new(trial, vocab);
            let cfg = DecodeConfig {
                num_beams: vocab.pow(max_len as u32),
                max_len,
                ..DecodeConfig::default()
            };
            assert_eq!(beam_search(&m, &cfg).unwrap(), exhaustive(&m, max_len), "trial {trial}");
        }
    }

    #[test]
    fn five_by_three_beam_matches_enumeration() {
        let m = RandomModel::new(7, 5);
        let cfg = DecodeConfig {
            num_beams: 125,
            max_len: 3,
            ..DecodeConfig::default()
        };
        assert_eq!(beam_search(&m, &cfg).unwrap(), exhaustive(&m, 3));
    }

    #[test]
    fn single_beam_is_greedy() {
        for seed in 0..30 {
            let m = RandomModel::new(seed, 8);
            let cfg = DecodeConfig {
                num_beams: 1,
                max_len: 6,
                ..DecodeConfig::default()
            };
            let b = beam_search(&m, &cfg).unwrap();
            let g = greedy(&m, 6).unwrap();
            assert_eq!((b.tokens, b.stop), (g.tokens, g.stop), "seed {seed}");
        }
    }

    #[test]
    fn simctg_without_penalty_is_greedy() {
        for seed in 0..100 {
            let m = RandomModel::new(1000 + seed, 7);
            let cfg = DecodeConfig {
                alpha: 0.0,
                max_len: 5,
                ..DecodeConfig::default()
            };
            let s = contrastive_search(&m, &cfg).unwrap();
            let g = greedy(&m, 5).unwrap();
            assert_eq!((s.tokens, s.stop), (g.tokens, g.stop), "seed {seed}");
        }
    }

    #[test]
    fn simctg_with_full_penalty_picks_least_similar_candidate() {
        let m = RandomModel::new(5, 9);
        let cfg = DecodeConfig {
            alpha: 1.0,
            max_len: 1,
            simctg_k: 4,
            ..DecodeConfig::default()
        };
        let base = m.forward(&[]).unwrap();
        let probs = softmax_with_temperature(&base.logits, 1.0);
        let cands = top_k_candidates(&probs, 4);
        let pen = |v: usize| {
            let h = m.forward(&[v as u32]).unwrap().hidden;
            (0..base.hidden.rows())
                .map(|j| cosine(h.row(h.rows() - 1), base.hidden.row(j)))
                .fold(f32::NEG_INFINITY, f32::max)
        };
        let expected = *cands.iter().min_by(|&&a, &&b| pen(a).total_cmp(&pen(b)).then(a.cmp(&b))).unwrap();
        let d = contrastive_search(&m, &cfg).unwrap();
        let got = if d.stop == StopReason::Eos { EOS as usize } else { d.tokens[0] as usize };
        assert_eq!(got, expected);
    }

    #[test]
    fn shifting_logits_keeps_deterministic_choices() {
        for seed in 0..10 {
            let a = RandomModel::new(seed, 6);
            let b = RandomModel { shift: 3.0, ..RandomModel::new(seed, 6) };
            let cfg = DecodeConfig { max_len: 5, num_beams: 3, ..DecodeConfig::default() };
            assert_eq!(beam_search(&a, &cfg).unwrap().tokens, beam_search(&b, &cfg).unwrap().tokens);
            assert_eq!(greedy(&a, 5).unwrap(), Decoded { score: greedy(&a, 5).unwrap().score, ..greedy(&b, 5).unwrap() });
            assert_eq!(contrastive_search(&a, &cfg).unwrap().tokens, contrastive_search(&b, &cfg).unwrap().tokens);
        }
    }

    #[test]
    fn no_sentence_exceeds_max_len() {
        for strategy in [Strategy::Beam, Strategy::TopK, Strategy::Nucleus, Strategy::Simctg] {
            for seed in 0..10 {
                let m = RandomModel::new(seed, 5);
                let cfg = DecodeConfig { strategy, max_len: 3, ..DecodeConfig::default() };
                let d = decode(&m, &cfg, seed).unwrap();
                assert!(d.tokens.len() <= 3);
                if d.stop == StopReason::Length {
                    assert_eq!(d.tokens.len(), 3);
                }
            }
        }
    }

    fn rank_oracle(probs: &[f64], i: usize) -> usize {
        (0..probs.len()).filter(|&j| probs[j] > probs[i] || (probs[j] == probs[i] && j < i)).count()
    }

    fn top_k_oracle(probs: &[f64], k: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..probs.len()).filter(|&i| rank_oracle(probs, i) < k).collect();
        v.sort();
        v
    }

    fn nucleus_oracle(probs: &[f64], p: f64) -> Vec<usize> {
        // a token is needed iff the mass ranked strictly before it is short of p
        let mut v: Vec<usize> = (0..probs.len())
            .filter(|&i| {
                let before: f64 = (0..probs.len()).filter(|&j| rank_oracle(probs, j) < rank_oracle(probs, i)).map(|j| probs[j]).sum();
                before < p
            })
            .collect();
        v.sort();
        v
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort();
        v
    }

    #[test]
    fn candidate_sets_match_brute_force() {
        let mut r = rng::seeded(9);
        for case in 0..1000 {
            let n = r.random_range(2..=12);
            let mut logits: Vec<f32> = rng::gaussian_vec(&mut r, n, 2.0).into_iter().map(|v| v as f32).collect();
            if case % 4 == 0 {
                // coarse values force ties
                logits.iter_mut().for_each(|v| *v = (*v).round());
            }
            let probs = softmax_with_temperature(&logits, 1.0);
            let k = r.random_range(1..=n + 1);
            let p = r.random_range(0.05..=1.0);
            assert_eq!(sorted(top_k_candidates(&probs, k)), top_k_oracle(&probs, k), "case {case}");
            assert_eq!(sorted(nucleus_candidates(&probs, p)), nucleus_oracle(&probs, p), "case {case}");
        }
    }

    #[test]
    fn nucleus_definition_examples() {
        let probs = [0.5, 0.3, 0.2];
        assert_eq!(nucleus_candidates(&probs, 0.7), vec![0, 1]);
        assert_eq!(sorted(nucleus_candidates(&probs, 1.0)), vec![0, 1, 2]);
        assert_eq!(nucleus_candidates(&probs, 0.1), vec![0]);
        assert_eq!(top_k_candidates(&probs, 1), vec![0]);
        assert_eq!(sorted(top_k_candidates(&probs, 10)), vec![0, 1, 2]);
    }

    #[test]
    fn top_k_sampling_frequencies_follow_renormalized_mass() {
        let probs = [0.5, 0.3, 0.2];
        let cands = top_k_candidates(&probs, 2);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for i in 0..draws {
            let mut r = rng::keyed(1, 0, i);
            counts[sample_candidate(&probs, &cands, &mut r)] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!((counts[0] as f64 / draws as f64 - 0.625).abs() < 0.01);
        assert!((counts[1] as f64 / draws as f64 - 0.375).abs() < 0.01);
    }

    #[test]
    fn sampling_is_reproducible_and_seed_dependent() {
        let m = RandomModel::new(3, 10);
        let cfg = DecodeConfig { strategy: Strategy::Nucleus, p: 0.95, max_len: 8, ..DecodeConfig::default() };
        let a = decode(&m, &cfg, 4).unwrap();
        assert_eq!(a, decode(&m, &cfg, 4).unwrap());
        let differs = (0..20).any(|s| decode(&m, &DecodeConfig { seed: s + 1, ..cfg.clone() }, 4).unwrap() != a);
        assert!(differs);
        let beam = DecodeConfig { seed: 99, ..DecodeConfig::default() };
        assert_eq!(decode(&m, &beam, 0).unwrap(), decode(&m, &DecodeConfig::default(), 5).unwrap());
    }

    #[test]
    fn k_one_sampling_is_greedy() {
        for seed in 0..10 {
            let m = RandomModel::new(seed, 6);
            let cfg = DecodeConfig { strategy: Strategy::TopK, k: 1, max_len: 5, ..DecodeConfig::default() };
            let s = decode(&m, &cfg, seed).unwrap();
            let g = greedy(&m, 5).unwrap();
            assert_eq!((s.tokens, s.stop), (g.tokens, g.stop));
        }
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        for bad in [
            DecodeConfig { p: 0.0, ..DecodeConfig::default() },
            DecodeConfig { alpha: 1.5, ..DecodeConfig::default() },
            DecodeConfig { num_beams: 0, ..DecodeConfig::default() },
            DecodeConfig { max_len: 0, ..DecodeConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn candidate_sets_are_rank_prefixes(logits in proptest::collection::vec(-5.0f32..5.0, 2..20), p in 0.01f64..1.0, k in 1usize..25) {
            let probs = softmax_with_temperature(&logits, 1.0);
            let order = rank_order(&probs);
            let tk = top_k_candidates(&probs, k);
            prop_assert_eq!(&tk[..], &order[..tk.len()]);
            let nc = nucleus_candidates(&probs, p);
            prop_assert_eq!(&nc[..], &order[..nc.len()]);
            prop_assert!(nc.contains(&order[0]));
        }
    }
}
