//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset, e.g. `cargo test --test acceptance -- 6 7`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;

use vistory::checkpoint::{load_lm, load_model, SavedModel};
use vistory::formats::{read_jsonl, JsonlWriter, StepLine};
use vistory::pipeline::{self, toy_encoder_config, toy_lm_config, toy_mapping_config, SynthOptions};
use vistory_core::autodiff::Graph;
use vistory_core::data::{DatasetSplits, RawSplits, SplitName};
use vistory_core::decoding::{
    beam_search, contrastive_search, generate_story, greedy, log_softmax, nucleus_candidates, softmax_with_temperature, top_k_candidates, DecodeConfig,
    DecodeModel, Decoded, ModelOutput, PromptedLm, StopReason, StoryInput, Strategy,
};
use vistory_core::encoder::{EncoderStub, FeatureSource, FeatureTable};
use vistory_core::lm::{LanguageModel, LmConfig};
use vistory_core::mapping::{ContextMode, MappingConfig, MappingNetwork, PrefixModel, PromptContext};
use vistory_core::metrics::{corpus_eval, diversity, rep_n, EvalOptions};
use vistory_core::rng;
use vistory_core::tokenizer::Vocab;
use vistory_core::training::{
    build_examples, infonce_loss, mapping_gradcheck_suite, nll_loss_mean, suite_options, train, validation_loss, CurriculumState, Phase,
    PretrainConfig, TrainConfig, TrainEvent,
};
use vistory_core::{HasParams, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Shared toy setup

struct Toy {
    table: FeatureTable,
    vocab: Vocab,
    data: DatasetSplits,
    lm: LanguageModel,
    encoder: EncoderStub,
}

impl Toy {
    fn features(&self) -> FeatureSource<'_> {
        FeatureSource::with_table(&self.encoder, &self.table, false)
    }
}

fn pretrain_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 3e-3,
        warmup_steps: 50,
        weight_decay: 0.0,
        seed,
    }
}

fn build_toy(raw: RawSplits, table: FeatureTable, shape: LmConfig, pretrain: &PretrainConfig) -> Toy {
    let (lm, vocab, _) = pipeline::pretrain(&raw, shape, pretrain, &mut |_, _| {}).unwrap();
    let data = raw.tokenize(&vocab).unwrap();
    Toy {
        table,
        vocab,
        data,
        lm,
        encoder: EncoderStub::new(toy_encoder_config()),
    }
}

/// The 64-album toy set with a pretrained language model.
fn toy64() -> &'static Toy {
    static CELL: OnceLock<Toy> = OnceLock::new();
    CELL.get_or_init(|| {
        let (raw, table) = pipeline::synthesize(&SynthOptions::default()).unwrap();
        build_toy(raw, table, toy_lm_config(0), &pretrain_config(0))
    })
}

fn toy_train_config(seed: u64, lambda: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 12,
        n_nll: 4,
        lambda,
        lr: 1e-3,
        warmup_steps: 20,
        context_mode: ContextMode::Before,
        context_sentences: 1,
        max_len: 20,
        seed,
        ..TrainConfig::default()
    }
}

fn train_on(toy: &Toy, mapping: MappingConfig, cfg: &TrainConfig) -> SavedModel {
    let (saved, _) = pipeline::train_model(toy.lm.clone(), &toy.vocab, mapping, cfg, &toy.data, &toy.features(), &mut |_| {}).unwrap();
    saved
}

fn mapping_for(toy: &Toy) -> MappingConfig {
    toy_mapping_config(toy.encoder.d_feat(), toy.lm.config().embed_dim)
}

/// One trained checkpoint shared by the decoding criteria.
fn reference_model() -> &'static SavedModel {
    static CELL: OnceLock<SavedModel> = OnceLock::new();
    CELL.get_or_init(|| {
        let toy = toy64();
        train_on(toy, mapping_for(toy), &toy_train_config(0, 0.3))
    })
}

fn decode_cfg(strategy: Strategy, seed: u64) -> DecodeConfig {
    DecodeConfig {
        strategy,
        max_len: 20,
        seed,
        ..DecodeConfig::default()
    }
}

/// Stories of the validation and test splits.
fn eval_stories(saved: &SavedModel, toy: &Toy, cfg: &DecodeConfig, mode: ContextMode, l: usize) -> Vec<vistory_core::decoding::GeneratedStory> {
    let f = toy.features();
    let mut out = pipeline::generate_split(saved, &toy.data, SplitName::Val, &f, cfg, mode, l, None).unwrap();
    out.extend(pipeline::generate_split(saved, &toy.data, SplitName::Test, &f, cfg, mode, l, None).unwrap());
    out
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cases = mapping_gradcheck_suite(false, &suite_options(0)).map_err(err)?;
    let lib_worst = cases.iter().map(|c| c.report.max_relative_error).fold(0.0, f64::max);
    let lib_secs = start.elapsed().as_secs_f64();
    let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vistory")).args(["gradcheck", "--paper-shape"]).output().map_err(err)?;
    let cli_secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cli_line = stdout.lines().last().unwrap_or("").to_string();
    let finite = cases.iter().all(|c| c.report.non_finite.is_empty() && c.report.checked > 0);
    check(
        finite && lib_worst < 1e-4 && out.status.code() == Some(0) && lib_secs < 120.0 && cli_secs < 120.0,
        format!(
            "cases {names:?}: max rel err {lib_worst:.2e} ({lib_secs:.1}s); `gradcheck --paper-shape` exit {:?}, {cli_line}",
            out.status.code()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Decoding oracles

/// Next-token logits and hidden rows drawn from a stream keyed by the
/// token history.
struct RandomModel {
    seed: u64,
    vocab: usize,
}

impl RandomModel {
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

    fn forward(&self, generated: &[u32]) -> vistory_core::Result<ModelOutput> {
        let logits = rng::gaussian_vec(&mut self.stream(generated, 0), self.vocab, 2.0).into_iter().map(|v| v as f32).collect();
        let rows: Vec<Vec<f32>> = (0..=generated.len())
            .map(|i| rng::gaussian_vec(&mut self.stream(&generated[..i], 1), 6, 1.0).into_iter().map(|v| v as f32).collect())
            .collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        Ok(ModelOutput { logits, hidden: Tensor::from_rows(&refs)? })
    }
}

/// Highest-scoring EOS-terminated sequence over all sequences of at most
/// `max_len` tokens; the best full-length one when none can finish.
fn exhaustive_argmax(m: &RandomModel, max_len: usize) -> Decoded {
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut capped: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((seq, score)) = stack.pop() {
        let lp = log_softmax(&m.next_logits(&seq).unwrap());
        for (v, l) in lp.iter().enumerate() {
            let s = score + l;
            if v as u32 == vistory_core::tokenizer::EOS {
                done.push((seq.clone(), s));
                continue;
            }
            let mut next = seq.clone();
            next.push(v as u32);
            if next.len() == max_len {
                capped.push((next, s));
            } else {
                stack.push((next, s));
            }
        }
    }
    let (pool, stop) = if done.is_empty() { (capped, StopReason::Length) } else { (done, StopReason::Eos) };
    let best = pool
        .into_iter()
        .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
        .unwrap();
    Decoded { tokens: best.0, stop, score: best.1 }
}

fn rank(probs: &[f64], i: usize) -> usize {
    (0..probs.len()).filter(|&j| probs[j] > probs[i] || (probs[j] == probs[i] && j < i)).count()
}

fn brute_top_k(probs: &[f64], k: usize) -> Vec<usize> {
    (0..probs.len()).filter(|&i| rank(probs, i) < k).collect()
}

fn brute_nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    (0..probs.len())
        .filter(|&i| {
            let ahead: f64 = (0..probs.len()).filter(|&j| rank(probs, j) < rank(probs, i)).map(|j| probs[j]).sum();
            ahead < p
        })
        .collect()
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn criterion_2() -> Outcome {
    let mut r = rng::seeded(2024);
    let mut beam_bad = 0;
    for trial in 0..20 {
        let vocab = r.random_range(3..=6);
        let len = r.random_range(1..=4);
        let m = RandomModel { seed: 7000 + trial, vocab };
        let cfg = DecodeConfig { num_beams: vocab.pow(len as u32), max_len: len, ..DecodeConfig::default() };
        if beam_search(&m, &cfg).map_err(err)? != exhaustive_argmax(&m, len) {
            beam_bad += 1;
        }
    }
    let mut set_bad = 0;
    for case in 0..1000 {
        let n = r.random_range(2..=12);
        let mut logits: Vec<f32> = rng::gaussian_vec(&mut r, n, 2.0).into_iter().map(|v| v as f32).collect();
        if case % 3 == 0 {
            logits.iter_mut().for_each(|v| *v = v.round());
        }
        let probs = softmax_with_temperature(&logits, 1.0);
        let k = r.random_range(1..=n + 1);
        let p = r.random_range(0.05..=1.0);
        if sorted(top_k_candidates(&probs, k)) != brute_top_k(&probs, k) || sorted(nucleus_candidates(&probs, p)) != brute_nucleus(&probs, p) {
            set_bad += 1;
        }
    }
    let mut simctg_bad = 0;
    for trial in 0..100 {
        let m = RandomModel { seed: 9000 + trial, vocab: 8 };
        let cfg = DecodeConfig { alpha: 0.0, max_len: 6, ..DecodeConfig::default() };
        let s = contrastive_search(&m, &cfg).map_err(err)?;
        let g = greedy(&m, 6).map_err(err)?;
        if (s.tokens, s.stop) != (g.tokens, g.stop) {
            simctg_bad += 1;
        }
    }
    check(
        beam_bad + set_bad + simctg_bad == 0,
        format!("beam vs exhaustive mismatches {beam_bad}/20, candidate-set mismatches {set_bad}/1000, simctg(alpha=0) vs greedy mismatches {simctg_bad}/100"),
    )
}

// ---------------------------------------------------------------------------
// 3. Loss analytics

fn criterion_3() -> Outcome {
    let v = 37usize;
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::zeros(&[3, v]), false);
    let nll = nll_loss_mean(&mut g, logits, &[(0, 5), (1, 0), (2, 36)]).map_err(err)?;
    let nll_err = (g.scalar(nll) - (v as f64).ln()).abs();

    let mut g = Graph::<f64>::new();
    let row = [0.3, -1.2, 0.8, 0.5];
    let same: Vec<&[f64]> = vec![&row; 5];
    let img = g.input(Tensor::from_rows(&same).unwrap(), false);
    let txt = g.input(Tensor::from_rows(&same).unwrap(), false);
    let nce = infonce_loss(&mut g, img, txt, 1.0, false).map_err(err)?;
    let nce_err = (g.scalar(nce) - 4f64.ln()).abs();

    let toy = toy64();
    let dir = tempfile::tempdir().map_err(err)?;
    let small = MappingConfig { prefix_len: 4, clip_len: 4, n_layers: 1, n_heads: 2, ..mapping_for(toy) };
    let runs = [
        ("curriculum", toy_train_config(3, 0.3)),
        (
            "sis",
            TrainConfig { batch_size: 2, epochs: 80, n_nll: 40, curriculum: false, warmup_steps: 50, ..toy_train_config(4, 0.3) },
        ),
    ];
    let mut steps = 0usize;
    let mut violations = Vec::new();
    let mut phases = BTreeMap::new();
    for (name, cfg) in &runs {
        let path = dir.path().join(format!("{name}.steps.jsonl"));
        let mut w = JsonlWriter::create(&path).map_err(err)?;
        pipeline::train_model(toy.lm.clone(), &toy.vocab, small.clone(), cfg, &toy.data, &toy.features(), &mut |ev| {
            if let TrainEvent::Step(s) = ev {
                w.write(&StepLine::from(s)).unwrap();
            }
        })
        .map_err(err)?;
        w.finish().map_err(err)?;
        for s in read_jsonl::<StepLine>(&path).map_err(err)? {
            steps += 1;
            let active = s.phase == "SIS" && s.epoch >= cfg.n_nll;
            *phases.entry((s.phase.clone(), active)).or_insert(0usize) += 1;
            let ok = match (active, s.contras) {
                (true, Some(c)) => (s.combined - (s.nll + cfg.lambda * c)).abs() <= 1e-9 * s.combined.abs().max(1.0),
                (false, None) => s.combined == s.nll,
                _ => false,
            };
            if !ok {
                violations.push(s.step);
            }
        }
    }
    check(
        nll_err < 1e-6 && nce_err < 1e-6 && steps >= 10_000 && violations.is_empty(),
        format!(
            "|NLL - ln {v}| = {nll_err:.1e}, |InfoNCE - ln 4| = {nce_err:.1e}; {steps} logged steps, {} violations; steps by (phase, contrastive) {phases:?}",
            violations.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Curriculum trace

fn criterion_4() -> Outcome {
    let mut s = CurriculumState::new(1, 0.0);
    let script = [3.0, 3.0, 2.0, 2.0, 2.5, 2.5];
    let mut trace = Vec::new();
    for v in script {
        let next = s.step(v).map_err(err)?;
        trace.push(next);
        if next == Phase::Stopped {
            break;
        }
    }
    let seq: Vec<&str> = s.phase_sequence().iter().map(|p| p.as_str()).collect();
    let per_epoch: Vec<&str> = trace.iter().map(|p| p.as_str()).collect();
    let expected_epochs = ["DII", "SIS", "SIS", "DII", "DII", "STOPPED"];
    check(
        seq == ["DII", "SIS", "DII", "STOPPED"] && per_epoch == expected_epochs && s.step(1.0).is_err(),
        format!("losses {script:?} give phases {} (next phase per epoch {per_epoch:?})", seq.join(" -> ")),
    )
}

// ---------------------------------------------------------------------------
// 5. Metric hand values and invariants

fn criterion_5() -> Outcome {
    let (a, b, c, d) = (10u32, 11, 12, 13);
    let hand = [
        (rep_n(&[a, a, a, a], 1), 0.75),
        (rep_n(&[a, b, c, d], 2), 0.0),
        (rep_n(&[a, b, a, b, a], 2), 0.5),
        (diversity(&[a, b, c, d]).unwrap_or(-1.0), 1.0),
    ];
    let hand_ok = hand.iter().all(|(x, y)| x == y);
    let five = diversity(&[a; 5]).unwrap_or(-1.0);
    let five_ok = (five - 0.0416667).abs() < 1e-6 && diversity(&[a, b, c]).is_none();
    let mut r = rng::seeded(55);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = r.random_range(0..30);
        let alphabet = r.random_range(1..8u32);
        let toks: Vec<u32> = (0..n).map(|_| r.random_range(0..alphabet)).collect();
        let mut perm: Vec<u32> = (0..alphabet).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
        let relabeled: Vec<u32> = toks.iter().map(|&t| 100 + perm[t as usize]).collect();
        for k in 1..=4 {
            let x = rep_n(&toks, k);
            if !(0.0..=1.0).contains(&x) || x != rep_n(&relabeled, k) {
                bad += 1;
            }
        }
        if let Some(dv) = diversity(&toks) {
            let prod: f64 = (2..=4).map(|k| 1.0 - rep_n(&toks, k)).product();
            let ones = (2..=4).all(|k| rep_n(&toks, k) == 0.0);
            if !(0.0..=1.0).contains(&dv) || (dv - prod).abs() > 1e-9 || (dv == 1.0) != ones {
                bad += 1;
            }
        } else if n >= 4 {
            bad += 1;
        }
    }
    check(hand_ok && five_ok && bad == 0, format!("hand values {hand:?}, diversity([a]*5) = {five:.7}; randomized violations {bad}/1000 cases"))
}

// ---------------------------------------------------------------------------
// 6. Overfit sanity

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let (mut raw, table) = pipeline::synthesize(&SynthOptions { seed: 0, albums: 8, noise: 0.5 }).map_err(err)?;
    for name in [SplitName::Val, SplitName::Test] {
        let moved = std::mem::take(raw.split_mut(name));
        raw.train.dii.extend(moved.dii);
        raw.train.sis.extend(moved.sis);
    }
    let shape = LmConfig { embed_dim: 64, ..toy_lm_config(0) };
    let toy = build_toy(raw, table, shape, &PretrainConfig { epochs: 100, ..pretrain_config(0) });
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 200,
        n_nll: 200,
        lambda: 0.0,
        lr: 1e-3,
        weight_decay: 0.0,
        warmup_steps: 20,
        context_mode: ContextMode::None,
        context_sentences: 0,
        curriculum: false,
        max_len: 20,
        seed: 0,
        ..TrainConfig::default()
    };
    let features = toy.features();
    let net = MappingNetwork::new(mapping_for(&toy), cfg.seed).map_err(err)?;
    let mut model = PrefixModel::new(toy.lm.clone(), net).map_err(err)?;
    let examples = build_examples(&toy.data.train, Phase::Sis, &cfg, &toy.encoder, &features).map_err(err)?;
    let initial = validation_loss(&model, &examples, &cfg).map_err(err)?.unwrap();
    train(&cfg, &mut model, &toy.data, &toy.encoder, &features, &mut |_| {}).map_err(err)?;
    let last = validation_loss(&model, &examples, &cfg).map_err(err)?.unwrap();
    let max_rows = model.lm.config().max_positions - cfg.max_len;
    let dcfg = decode_cfg(Strategy::Beam, 0);
    let mut hits = 0;
    let mut misses = Vec::new();
    for s in &toy.data.train.sis {
        let image = features.image(&s.image_ids[0]).map_err(err)?;
        let (prompt, _) = model.mapping.prefix_sequence(&model.lm, &image, PromptContext::None, max_rows).map_err(err)?;
        let d = beam_search(&PromptedLm { lm: &model.lm, prompt: &prompt.vectors }, &dcfg).map_err(err)?;
        if d.tokens == s.sentences[0].0 {
            hits += 1;
        } else {
            misses.push(format!("{:?} vs {:?}", toy.vocab.decode(&d.tokens), toy.vocab.decode(s.sentences[0].ids())));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / initial;
    check(
        ratio < 0.15 && hits >= 6 && secs < 600.0,
        format!(
            "training NLL {initial:.3} -> {last:.3} ({:.1}% of initial); {hits}/8 first sentences reproduced; {secs:.0}s{}",
            100.0 * ratio,
            if misses.is_empty() { String::new() } else { format!("; misses: {}", misses.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Contrastive direction

fn criterion_7() -> Outcome {
    let toy = toy64();
    let seeds = [11u64, 12, 13, 14, 15];
    let cfg = decode_cfg(Strategy::Beam, 0);
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &seeds {
        for (lambda, out) in [(0.3, &mut with), (0.0, &mut without)] {
            let saved = train_on(toy, mapping_for(toy), &toy_train_config(seed, lambda));
            let stories = eval_stories(&saved, toy, &cfg, ContextMode::Before, 1);
            let f = toy.features();
            let report = corpus_eval(&stories, &toy.encoder, &f, None, &EvalOptions::default()).map_err(err)?;
            out.push(report.aggregate.grounding.unwrap_or(0.0));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    check(
        a >= b,
        format!("mean grounding lambda=0.3: {a:.4} [{}] vs lambda=0: {b:.4} [{}] over seeds {seeds:?}", fmt(&with), fmt(&without)),
    )
}

// ---------------------------------------------------------------------------
// 8. Degeneration ordering

fn criterion_8() -> Outcome {
    let toy = toy64();
    let saved = reference_model();
    let f = toy.features();
    let div = |cfg: &DecodeConfig| -> Result<f64, String> {
        let stories = eval_stories(saved, toy, cfg, ContextMode::Before, 1);
        let r = corpus_eval(&stories, &toy.encoder, &f, None, &EvalOptions::default()).map_err(err)?;
        Ok(r.aggregate.diversity.unwrap_or(0.0))
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let beam = div(&decode_cfg(Strategy::Beam, seed))?;
        let nucleus = div(&decode_cfg(Strategy::Nucleus, seed))?;
        if nucleus > beam {
            wins += 1;
        }
        rows.push(format!("seed {seed}: nucleus {nucleus:.2} vs beam {beam:.2}"));
    }
    check(wins >= 4, format!("nucleus more diverse in {wins}/5 seeds ({})", rows.join("; ")))
}

// ---------------------------------------------------------------------------
// 9. Frozen-ness and reproducibility

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vistory")).current_dir(dir).args(args).output().map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`vistory {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn end_to_end(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf");
    let config = config.to_str().unwrap();
    run_cli(dir, &["synth-data", "--out", "data", "--albums", "16", "--seed", "5"])?;
    run_cli(dir, &["pretrain-lm", "--data", "data", "--out", "lm.ckpt", "--epochs", "5", "--seed", "5"])?;
    run_cli(dir, &["train", "--data", "data", "--lm", "lm.ckpt", "--out", "model.ckpt", "--config", config, "--epochs", "4", "--n-nll", "2", "--seed", "5"])?;
    run_cli(dir, &["generate", "--model", "model.ckpt", "--data", "data", "--out", "beam.jsonl", "--config", config])?;
    run_cli(dir, &["generate", "--model", "model.ckpt", "--data", "data", "--out", "nucleus.jsonl", "--strategy", "nucleus", "--seed", "3"])?;
    let read = |n: &str| std::fs::read(dir.join(n)).map_err(err);
    Ok((read("beam.jsonl")?, read("nucleus.jsonl")?))
}

fn criterion_9() -> Outcome {
    let toy = toy64();
    let lm_before = toy.lm.params().checksum();
    let enc_before = toy.encoder.checksum();
    let features = toy.features();
    let net = MappingNetwork::new(mapping_for(toy), 9).map_err(err)?;
    let mut model = PrefixModel::new(toy.lm.clone(), net).map_err(err)?;
    let map_before = model.mapping.params().checksum();
    let cfg = TrainConfig { epochs: 3, n_nll: 1, ..toy_train_config(9, 0.3) };
    train(&cfg, &mut model, &toy.data, &toy.encoder, &features, &mut |_| {}).map_err(err)?;
    let lm_same = model.lm.params().checksum() == lm_before;
    let enc_same = toy.encoder.checksum() == enc_before;
    let mapping_moved = model.mapping.params().checksum() != map_before;

    let (d1, d2) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let (b1, n1) = end_to_end(d1.path())?;
    let (b2, n2) = end_to_end(d2.path())?;
    let (cli_lm, _) = load_lm(&d1.path().join("lm.ckpt")).map_err(err)?;
    let cli_model = load_model(&d1.path().join("model.ckpt")).map_err(err)?;
    let cli_frozen = cli_lm.params().checksum() == cli_model.model.lm.params().checksum();
    let identical = b1 == b2 && n1 == n2 && !b1.is_empty() && !n1.is_empty();
    check(
        lm_same && enc_same && mapping_moved && cli_frozen && identical,
        format!(
            "LM checksum unchanged: {lm_same}, encoder checksum unchanged: {enc_same}, mapping updated: {mapping_moved}, checkpointed LM equals pretrained LM: {cli_frozen}; two CLI runs byte-identical: {identical} ({} + {} bytes)",
            b1.len(),
            n1.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Context plumbing

fn criterion_10() -> Outcome {
    let toy = toy64();
    let saved = reference_model();
    let f = toy.features();
    let cfg = decode_cfg(Strategy::Beam, 0);
    let mut r = rng::seeded(10);
    let mut checked = 0;
    let mut changed = 0;
    for s in toy.data.test.sis.iter().chain(&toy.data.val.sis) {
        let ctx = s.album_context();
        let base_input = StoryInput { sequence_id: &s.album_id, image_ids: &s.image_ids, album_context: &ctx };
        let base = generate_story(&saved.model, &toy.encoder, &f, &base_input, &cfg, ContextMode::None, 0, 0).map_err(err)?;
        for i in 0..s.image_ids.len() {
            let mut ids = s.image_ids.clone();
            let mut others: Vec<usize> = (0..ids.len()).filter(|&j| j != i).collect();
            let original = others.clone();
            while others == original {
                rand::seq::SliceRandom::shuffle(&mut others[..], &mut r);
            }
            for (slot, from) in original.iter().zip(&others) {
                ids[*slot] = s.image_ids[*from].clone();
            }
            let input = StoryInput { image_ids: &ids, ..base_input.clone() };
            let g = generate_story(&saved.model, &toy.encoder, &f, &input, &cfg, ContextMode::None, 0, 0).map_err(err)?;
            checked += 1;
            if g.sentences[i] != base.sentences[i] || !g.trace[i].context_tokens.is_empty() {
                changed += 1;
            }
        }
    }
    let mut trace_bad = 0;
    let mut stories = 0;
    for s in &toy.data.test.sis {
        let ctx = s.album_context();
        let input = StoryInput { sequence_id: &s.album_id, image_ids: &s.image_ids, album_context: &ctx };
        let g = generate_story(&saved.model, &toy.encoder, &f, &input, &cfg, ContextMode::Before, 1, 0).map_err(err)?;
        stories += 1;
        for i in 0..g.trace.len() {
            let expected = if i == 0 { ctx.clone() } else { g.sentences[i - 1].0.clone() };
            if g.trace[i].context_tokens != expected {
                trace_bad += 1;
            }
        }
    }
    let example = {
        let s = &toy.data.test.sis[0];
        let ctx = s.album_context();
        let input = StoryInput { sequence_id: &s.album_id, image_ids: &s.image_ids, album_context: &ctx };
        let g = generate_story(&saved.model, &toy.encoder, &f, &input, &cfg, ContextMode::Before, 1, 0).map_err(err)?;
        format!("{:?} <- context {:?}", toy.vocab.decode(g.sentences[1].ids()), toy.vocab.decode(&g.trace[1].context_tokens))
    };
    check(
        changed == 0 && trace_bad == 0,
        format!("L=0/none: {changed}/{checked} sentences changed under permutation of the other images; L=1 trace mismatches {trace_bad} over {stories} stories (e.g. {example})"),
    )
}

// ---------------------------------------------------------------------------

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("gradient correctness", criterion_1),
    ("decoding oracles", criterion_2),
    ("loss analytics", criterion_3),
    ("curriculum trace", criterion_4),
    ("metric hand values", criterion_5),
    ("overfit sanity", criterion_6),
    ("contrastive direction", criterion_7),
    ("degeneration ordering", criterion_8),
    ("frozen-ness and reproducibility", criterion_9),
    ("context plumbing", criterion_10),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected: Vec<usize> = (1..=CRITERIA.len()).filter(|n| wanted.is_empty() || wanted.contains(n)).collect();
    let results: Vec<(usize, Outcome, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&n| {
                scope.spawn(move || {
                    let start = Instant::now();
                    let out = std::panic::catch_unwind(CRITERIA[n - 1].1).unwrap_or_else(|_| Err("panicked".into()));
                    (n, out, start.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (n, out, secs) in &results {
        let (name, _) = CRITERIA[n - 1];
        match out {
            Ok(d) => println!("criterion {n} ({name}): PASS: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {d} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
