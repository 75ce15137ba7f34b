//! Story-level repetition and diversity, a cosine grounding score, and
//! corpus aggregation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::decoding::GeneratedStory;
use crate::encoder::{EncoderStub, FeatureSource, FeatureVector};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::tokenizer::{BOS, EOS};

/// Scale applied to the clamped cosine in [`grounding_score`].
pub const GROUNDING_SCALE: f64 = 2.5;

/// Unique and total `n`-grams of `segments`, never spanning a segment boundary.
pub fn ngram_counts(segments: &[&[u32]], n: usize) -> (usize, usize) {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for s in segments {
        if n == 0 || s.len() < n {
            continue;
        }
        for w in s.windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    (seen.len(), total)
}

fn rep_from_counts(unique: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        1.0 - unique as f64 / total as f64
    }
}

/// Fraction of duplicate `n`-grams in a token stream; 0 when it has none.
pub fn rep_n(tokens: &[u32], n: usize) -> f64 {
    let (u, t) = ngram_counts(&[tokens], n);
    rep_from_counts(u, t)
}

/// Product of `1 - rep_n` for n = 2, 3, 4; absent below four tokens.
pub fn diversity(tokens: &[u32]) -> Option<f64> {
    if tokens.len() < 4 {
        return None;
    }
    Some((2..=4).map(|n| 1.0 - rep_n(tokens, n)).product())
}

/// `2.5 * max(0, cos(text feature, image feature))`.
pub fn grounding_score(encoder: &EncoderStub, sentence: &[u32], image: &FeatureVector) -> Result<f64> {
    if image.dim() != encoder.d_feat() {
        return Err(Error::ShapeMismatch {
            op: "grounding_score",
            lhs: alloc::vec![encoder.d_feat()],
            rhs: alloc::vec![image.dim()],
        });
    }
    let c = encoder.encode_text(sentence).cosine(image) as f64;
    Ok(GROUNDING_SCALE * c.max(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Let n-grams run across sentence boundaries.
    pub bridge_sentences: bool,
    /// Aggregate rep-n over the pooled n-grams of the whole corpus instead
    /// of averaging per-story values.
    pub pooled: bool,
}

/// Metrics of one story, as fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryMetrics {
    pub sequence_id: String,
    pub rep: [f64; 4],
    pub diversity: Option<f64>,
    /// Mean grounding over the sentences whose image feature was found.
    pub grounding: Option<f64>,
    pub perplexity: Option<f64>,
    pub tokens: usize,
    pub ngrams: [usize; 4],
    pub skipped_pairs: usize,
}

/// Corpus aggregate on the percent scale (grounding and perplexity unscaled).
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub rep: [f64; 4],
    pub diversity: Option<f64>,
    pub grounding: Option<f64>,
    pub perplexity: Option<f64>,
    pub stories: usize,
    pub stories_without_diversity: usize,
    pub skipped_pairs: usize,
    pub pooled: bool,
    pub bridge_sentences: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub stories: Vec<StoryMetrics>,
    pub aggregate: Aggregate,
}

fn segments<'s>(sentences: &'s [Vec<u32>], stream: &'s [u32], bridge: bool) -> Vec<&'s [u32]> {
    if bridge {
        alloc::vec![stream]
    } else {
        sentences.iter().map(Vec::as_slice).collect()
    }
}

/// Summed negative log-likelihood and token count of `[BOS] s [EOS]` for
/// every sentence.
fn story_nll(lm: &LanguageModel, sentences: &[Vec<u32>]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut count = 0;
    for s in sentences {
        let mut seq = alloc::vec![BOS];
        seq.extend_from_slice(s);
        seq.push(EOS);
        let n = seq.len() - 1;
        nll += Float::ln(lm.perplexity(&seq)?) * n as f64;
        count += n;
    }
    Ok((nll, count))
}

pub fn story_metrics(
    story: &GeneratedStory,
    encoder: &EncoderStub,
    features: &FeatureSource,
    lm: Option<&LanguageModel>,
    opts: &EvalOptions,
) -> Result<StoryMetrics> {
    let sentences: Vec<Vec<u32>> = story.sentences.iter().map(|s| s.0.clone()).collect();
    let stream: Vec<u32> = sentences.concat();
    let segs = segments(&sentences, &stream, opts.bridge_sentences);
    let mut rep = [0.0; 4];
    let mut ngrams = [0; 4];
    for n in 1..=4 {
        let (u, t) = ngram_counts(&segs, n);
        rep[n - 1] = rep_from_counts(u, t);
        ngrams[n - 1] = t;
    }
    let diversity = (stream.len() >= 4).then(|| (1..4).map(|i| 1.0 - rep[i]).product());
    let mut grounding = Vec::new();
    let mut skipped = 0;
    for (s, t) in sentences.iter().zip(&story.trace) {
        match features.image(&t.image_id) {
            Ok(f) => grounding.push(grounding_score(encoder, s, &f)?),
            Err(Error::UnknownImage(id)) => {
                log::warn!("no feature for image {id}; grounding pair skipped");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let perplexity = match lm {
        Some(lm) => {
            let (nll, n) = story_nll(lm, &sentences)?;
            Some(Float::exp(nll / n as f64))
        }
        None => None,
    };
    Ok(StoryMetrics {
        sequence_id: story.sequence_id.clone(),
        rep,
        diversity,
        grounding: (!grounding.is_empty()).then(|| grounding.iter().sum::<f64>() / grounding.len() as f64),
        perplexity,
        tokens: stream.len(),
        ngrams,
        skipped_pairs: skipped,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-story metrics and their corpus means. Perplexity is pooled over all
/// scored tokens of the corpus.
pub fn corpus_eval(
    stories: &[GeneratedStory],
    encoder: &EncoderStub,
    features: &FeatureSource,
    lm: Option<&LanguageModel>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if stories.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty corpus".into()));
    }
    let per: Vec<StoryMetrics> = stories
        .iter()
        .map(|s| story_metrics(s, encoder, features, lm, opts))
        .collect::<Result<_>>()?;
    let (rep, diversity) = if opts.pooled {
        let streams: Vec<Vec<u32>> = stories.iter().map(|s| s.sentences.iter().flat_map(|t| t.0.iter().copied()).collect()).collect();
        let segs: Vec<&[u32]> = if opts.bridge_sentences {
            streams.iter().map(Vec::as_slice).collect()
        } else {
            stories.iter().flat_map(|s| s.sentences.iter().map(|t| t.0.as_slice())).collect()
        };
        let mut rep = [0.0; 4];
        for n in 1..=4 {
            let (u, t) = ngram_counts(&segs, n);
            rep[n - 1] = rep_from_counts(u, t);
        }
        let tokens: usize = streams.iter().map(Vec::len).sum();
        let div = (tokens >= 4).then(|| (1..4).map(|i| 1.0 - rep[i]).product::<f64>());
        (rep, div)
    } else {
        let mut rep = [0.0; 4];
        for (i, r) in rep.iter_mut().enumerate() {
            *r = mean(per.iter().map(|m| m.rep[i])).unwrap_or(0.0);
        }
        (rep, mean(per.iter().filter_map(|m| m.diversity)))
    };
    let perplexity = match lm {
        Some(lm) => {
            let mut nll = 0.0;
            let mut n = 0;
            for s in stories {
                let sentences: Vec<Vec<u32>> = s.sentences.iter().map(|t| t.0.clone()).collect();
                let (a, b) = story_nll(lm, &sentences)?;
                nll += a;
                n += b;
            }
            Some(Float::exp(nll / n as f64))
        }
        None => None,
    };
    let aggregate = Aggregate {
        rep: rep.map(|r| 100.0 * r),
        diversity: diversity.map(|d| 100.0 * d),
        grounding: mean(per.iter().filter_map(|m| m.grounding)),
        perplexity,
        stories: per.len(),
        stories_without_diversity: per.iter().filter(|m| m.diversity.is_none()).count(),
        skipped_pairs: per.iter().map(|m| m.skipped_pairs).sum(),
        pooled: opts.pooled,
        bridge_sentences: opts.bridge_sentences,
    };
    Ok(MetricReport { stories: per, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{SentenceTrace, StopReason, Strategy};
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::TokenSequence;
    use alloc::collections::BTreeMap;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    const A: u32 = 10;
    const B: u32 = 11;
    const C: u32 = 12;
    const D: u32 = 13;

    /// Counts n-grams with a map instead of a set.
    fn rep_oracle(tokens: &[u32], n: usize) -> f64 {
        if tokens.len() < n {
            return 0.0;
        }
        let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for i in 0..=tokens.len() - n {
            *counts.entry(tokens[i..i + n].to_vec()).or_default() += 1;
        }
        let total: usize = counts.values().sum();
        let dup: usize = counts.values().map(|c| c - 1).sum();
        dup as f64 / total as f64
    }

    #[test]
    fn hand_enumerated_values() {
        assert_eq!(rep_n(&[A, A, A, A], 1), 0.75);
        assert_eq!(rep_n(&[A, B, C, D], 2), 0.0);
        assert_eq!(rep_n(&[A, B, A, B, A], 2), 0.5);
        assert_eq!(rep_n(&[A], 2), 0.0);
        assert_eq!(diversity(&[A, B, C, D]), Some(1.0));
        let d = diversity(&[A, A, A, A, A]).unwrap();
        assert!((d - 0.25 * (1.0 / 3.0) * 0.5).abs() < 1e-12);
        assert!((d - 0.0416667).abs() < 1e-6);
        assert_eq!(diversity(&[A, B, C]), None);
    }

    fn story(id: &str, sentences: &[&[u32]]) -> GeneratedStory {
        GeneratedStory {
            sequence_id: id.into(),
            sentences: sentences.iter().map(|s| TokenSequence(s.to_vec())).collect(),
            trace: (0..sentences.len())
                .map(|i| SentenceTrace {
                    image_id: format!("{id}-img{i}"),
                    strategy: Strategy::Beam,
                    stop: StopReason::Eos,
                    context_tokens: vec![],
                    truncated: 0,
                })
                .collect(),
        }
    }

    fn encoder() -> EncoderStub {
        EncoderStub::new(EncoderConfig {
            vocab_size: 32,
            ..EncoderConfig::default()
        })
    }

    #[test]
    fn grounding_is_clamped_and_scaled() {
        let e = encoder();
        let s = [A, B, C];
        let t = e.encode_text(&s);
        assert!((grounding_score(&e, &s, &t).unwrap() - 2.5).abs() < 1e-5);
        let neg = FeatureVector::normalized(t.values().iter().map(|v| -v).collect()).unwrap();
        assert_eq!(grounding_score(&e, &s, &neg).unwrap(), 0.0);
        let mut orth = vec![0.0f32; e.d_feat()];
        let (i, j) = (0, 1);
        orth[i] = t.values()[j];
        orth[j] = -t.values()[i];
        let orth = FeatureVector::normalized(orth).unwrap();
        assert!(grounding_score(&e, &s, &orth).unwrap().abs() < 1e-6);
    }

    #[test]
    fn sentence_boundaries_are_not_bridged_by_default() {
        let e = encoder();
        let f = FeatureSource::synthetic(&e);
        let s = story("s", &[&[A, B], &[A, B]]);
        let plain = story_metrics(&s, &e, &f, None, &EvalOptions::default()).unwrap();
        assert_eq!(plain.ngrams[1], 2);
        assert_eq!(plain.rep[1], 0.5);
        let bridged = story_metrics(&s, &e, &f, None, &EvalOptions { bridge_sentences: true, pooled: false }).unwrap();
        assert_eq!(bridged.ngrams[1], 3);
        assert!((bridged.rep[1] - rep_oracle(&[A, B, A, B], 2)).abs() < 1e-12);
    }

    #[test]
    fn corpus_aggregate_is_percent_mean_of_stories() {
        let e = encoder();
        let f = FeatureSource::synthetic(&e);
        let single = corpus_eval(&[story("u", &[&[A, B], &[C, D]])], &e, &f, None, &EvalOptions::default()).unwrap();
        assert_eq!(single.aggregate.diversity, Some(100.0));
        let stories = [
            story("a", &[&[A, A, A], &[A, A]]),
            story("b", &[&[A, B, C, D, A, B]]),
            story("c", &[&[A]]),
        ];
        let r = corpus_eval(&stories, &e, &f, None, &EvalOptions::default()).unwrap();
        for n in 0..4 {
            let m = r.stories.iter().map(|s| s.rep[n]).sum::<f64>() / 3.0;
            assert!((r.aggregate.rep[n] - 100.0 * m).abs() < 1e-9);
        }
        let d: Vec<f64> = r.stories.iter().filter_map(|s| s.diversity).collect();
        assert_eq!(d.len(), 2);
        assert!((r.aggregate.diversity.unwrap() - 100.0 * (d[0] + d[1]) / 2.0).abs() < 1e-9);
        assert_eq!(r.aggregate.stories_without_diversity, 1);
        assert!(r.aggregate.grounding.is_some());
    }

    #[test]
    fn pooled_mode_counts_ngrams_across_stories() {
        let e = encoder();
        let f = FeatureSource::synthetic(&e);
        let stories = [story("a", &[&[A, B, C, D]]), story("b", &[&[A, B, C, D]])];
        let mean = corpus_eval(&stories, &e, &f, None, &EvalOptions::default()).unwrap();
        assert_eq!(mean.aggregate.rep, [0.0; 4]);
        let pooled = corpus_eval(&stories, &e, &f, None, &EvalOptions { pooled: true, bridge_sentences: false }).unwrap();
        assert_eq!(pooled.aggregate.rep, [50.0; 4]);
        assert!((pooled.aggregate.diversity.unwrap() - 12.5).abs() < 1e-9);
    }

    #[test]
    fn missing_features_are_skipped_and_counted() {
        let e = encoder();
        let mut table = crate::encoder::FeatureTable::new(e.d_feat(), crate::encoder::Provenance::Loaded);
        table.insert("s-img0".into(), e.encode_image("s-img0")).unwrap();
        let f = FeatureSource::with_table(&e, &table, false);
        let r = corpus_eval(&[story("s", &[&[A, B], &[C, D], &[A]])], &e, &f, None, &EvalOptions::default()).unwrap();
        assert_eq!(r.aggregate.skipped_pairs, 2);
        assert!(r.stories[0].grounding.is_some());
        assert!(corpus_eval(&[], &e, &f, None, &EvalOptions::default()).is_err());
    }

    #[test]
    fn perplexity_is_pooled_over_sentences() {
        let lm = LanguageModel::new(
            crate::lm::LmConfig {
                vocab_size: 16,
                embed_dim: 8,
                n_layers: 1,
                n_heads: 2,
                max_positions: 16,
            },
            3,
        )
        .unwrap();
        let e = encoder();
        let f = FeatureSource::synthetic(&e);
        let s = story("p", &[&[A, B], &[C]]);
        let r = corpus_eval(&[s], &e, &f, Some(&lm), &EvalOptions::default()).unwrap();
        let p1 = lm.perplexity(&[BOS, A, B, EOS]).unwrap();
        let p2 = lm.perplexity(&[BOS, C, EOS]).unwrap();
        let expected = ((3.0 * p1.ln() + 2.0 * p2.ln()) / 5.0).exp();
        assert!((r.aggregate.perplexity.unwrap() - expected).abs() < 1e-9 * expected);
        assert!(r.stories[0].perplexity.unwrap() >= 1.0);
    }

    fn token_vec() -> impl proptest::strategy::Strategy<Value = Vec<u32>> {
        proptest::collection::vec(0u32..6, 0..24)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rep_matches_oracle_and_is_relabel_invariant(tokens in token_vec(), perm_seed in any::<u64>()) {
            let mut perm: Vec<u32> = (0..6).collect();
            let mut r = crate::rng::seeded(perm_seed);
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
            let relabeled: Vec<u32> = tokens.iter().map(|&t| perm[t as usize]).collect();
            for n in 1..=4 {
                let v = rep_n(&tokens, n);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((v - rep_oracle(&tokens, n)).abs() < 1e-12);
                prop_assert_eq!(v, rep_n(&relabeled, n));
            }
        }

        #[test]
        fn diversity_is_product_and_in_range(tokens in token_vec()) {
            match diversity(&tokens) {
                None => prop_assert!(tokens.len() < 4),
                Some(d) => {
                    let prod: f64 = (2..=4).map(|n| 1.0 - rep_n(&tokens, n)).product();
                    prop_assert!((d - prod).abs() < 1e-9);
                    prop_assert!((0.0..=1.0).contains(&d));
                    let all_zero = (2..=4).all(|n| rep_n(&tokens, n) == 0.0);
                    prop_assert_eq!(d == 1.0, all_zero);
                }
            }
        }

        #[test]
        fn fresh_token_never_increases_rep(tokens in token_vec()) {
            let mut longer = tokens.clone();
            longer.push(99);
            for n in 1..=4 {
                prop_assert!(rep_n(&longer, n) <= rep_n(&tokens, n) + 1e-12);
            }
        }
    }
}
