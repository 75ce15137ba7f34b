use vistory_core::data::{aligned_feature_table, synthesize_toy_dataset, DatasetSplits};
use vistory_core::decoding::{generate_story, DecodeConfig, GeneratedStory, Strategy, StoryInput};
use vistory_core::encoder::{EncoderConfig, EncoderStub, FeatureSource, FeatureTable};
use vistory_core::lm::{LanguageModel, LmConfig};
use vistory_core::mapping::{ContextMode, MappingConfig, MappingNetwork, PrefixModel};

struct Setup {
    data: DatasetSplits,
    encoder: EncoderStub,
    table: FeatureTable,
    model: PrefixModel,
}

fn setup() -> Setup {
    let raw = synthesize_toy_dataset(3, 8).unwrap();
    let vocab = raw.build_vocab();
    let data = raw.tokenize(&vocab).unwrap();
    let encoder = EncoderStub::new(EncoderConfig::default());
    let table = aligned_feature_table(&raw, &vocab, &encoder, 0.5, 3).unwrap();
    let lm = LanguageModel::new(
        LmConfig {
            vocab_size: vocab.len(),
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_positions: 48,
        },
        1,
    )
    .unwrap();
    let mapping = MappingNetwork::new(
        MappingConfig {
            d_feat: encoder.d_feat(),
            d_model: 16,
            prefix_len: 4,
            clip_len: 4,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
        },
        2,
    )
    .unwrap();
    let model = PrefixModel::new(lm, mapping).unwrap();
    Setup { data, encoder, table, model }
}

fn narrate(s: &Setup, cfg: &DecodeConfig, mode: ContextMode, l: usize, index: u64) -> GeneratedStory {
    let story = &s.data.train.sis[0];
    let ctx = story.album_context();
    let input = StoryInput { sequence_id: &story.album_id, image_ids: &story.image_ids, album_context: &ctx };
    let features = FeatureSource::with_table(&s.encoder, &s.table, false);
    generate_story(&s.model, &s.encoder, &features, &input, cfg, mode, l, index).unwrap()
}

#[test]
fn after_mode_uses_the_last_l_predicted_sentences() {
    let s = setup();
    let cfg = DecodeConfig { max_len: 6, ..DecodeConfig::default() };
    let g = narrate(&s, &cfg, ContextMode::After, 2, 0);
    assert_eq!(g.sentences.len(), 5);
    assert_eq!(g.trace[0].context_tokens, s.data.train.sis[0].album_context());
    for i in 1..5usize {
        let from = i.saturating_sub(2);
        let expected: Vec<u32> = g.sentences[from..i].iter().flat_map(|t| t.0.clone()).collect();
        assert_eq!(g.trace[i].context_tokens, expected, "sentence {i}");
        assert!(g.sentences[i].0.len() <= 6);
    }
}

#[test]
fn sampling_streams_depend_on_story_index_only() {
    let s = setup();
    let cfg = DecodeConfig { strategy: Strategy::Nucleus, p: 0.95, max_len: 8, seed: 4, ..DecodeConfig::default() };
    let a = narrate(&s, &cfg, ContextMode::Before, 1, 0);
    assert_eq!(a, narrate(&s, &cfg, ContextMode::Before, 1, 0));
    let others: Vec<GeneratedStory> = (1..6).map(|i| narrate(&s, &cfg, ContextMode::Before, 1, i)).collect();
    assert!(others.iter().any(|o| o.sentences != a.sentences));
}

#[test]
fn long_context_is_truncated_to_fit_the_window() {
    let s = setup();
    let cfg = DecodeConfig { max_len: 40, ..DecodeConfig::default() };
    let g = narrate(&s, &cfg, ContextMode::After, 4, 0);
    assert!(g.trace.iter().any(|t| t.truncated > 0));
    let window = s.model.lm.config().max_positions;
    assert!(g.sentences.iter().all(|t| t.0.len() <= 40 && t.0.len() < window));
}
