//! Losses, the Adam optimizer, the DII/SIS curriculum and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::data::{DatasetSplits, Split};
use crate::encoder::{EncoderStub, FeatureSource, FeatureVector};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::lm::{LanguageModel, LmConfig};
use crate::mapping::{assemble_input, ContextMode, MappingConfig, MappingNetwork, PrefixModel, PromptContext};
use crate::param::{HasParams, ParamSet};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch from which the contrastive term is added.
    pub n_nll: usize,
    pub lambda: f64,
    pub tau: f64,
    pub include_positive_in_denominator: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub context_mode: ContextMode,
    /// Number of previous sentences used as context (`L`).
    pub context_sentences: usize,
    /// Alternate DII and SIS phases; otherwise train on SIS only.
    pub curriculum: bool,
    pub patience: usize,
    pub min_delta: f64,
    /// Generation budget reserved when fitting context into the LM window.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            epochs: 10,
            n_nll: 6,
            lambda: 0.3,
            tau: 1.0,
            include_positive_in_denominator: false,
            lr: 2e-5,
            weight_decay: 1e-4,
            warmup_steps: 1300,
            context_mode: ContextMode::Before,
            context_sentences: 1,
            curriculum: true,
            patience: 1,
            min_delta: 0.0,
            max_len: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_nll > self.epochs {
            return fail(format!("n_nll {} exceeds epochs {}", self.n_nll, self.epochs));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_len == 0 {
            return fail("batch_size, patience and max_len must be positive".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.min_delta >= 0.0) {
            return fail("lr, weight_decay and min_delta must be non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Dii,
    Sis,
    Stopped,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Dii => "DII",
            Self::Sis => "SIS",
            Self::Stopped => "STOPPED",
        }
    }
}

/// Summed negative log-likelihood of the targets.
pub fn nll_loss<'a, T: Real>(g: &mut Graph<'a, T>, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::EmptyMask("nll_loss"));
    }
    g.cross_entropy(logits, targets)
}

/// Per-token mean of [`nll_loss`], for reporting.
pub fn nll_loss_mean<'a, T: Real>(g: &mut Graph<'a, T>, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let s = nll_loss(g, logits, targets)?;
    Ok(g.scale(s, T::from_f64(1.0 / targets.len() as f64)))
}

/// InfoNCE over cosine similarities of paired rows, averaged over the batch.
/// The denominator sums over the other pairs only unless
/// `include_positive` is set.
pub fn infonce_loss<'a, T: Real>(g: &mut Graph<'a, T>, image_feats: Var, text_reps: Var, tau: f64, include_positive: bool) -> Result<Var> {
    if g.shape(image_feats) != g.shape(text_reps) {
        return Err(Error::ShapeMismatch {
            op: "infonce_loss",
            lhs: g.shape(image_feats).to_vec(),
            rhs: g.shape(text_reps).to_vec(),
        });
    }
    let a = g.normalize_rows(image_feats);
    let b = g.normalize_rows(text_reps);
    let sim = g.matmul_nt(a, b)?;
    g.info_nce(sim, T::from_f64(tau), include_positive)
}

/// Whether the contrastive term is active for this epoch and phase.
pub fn contrastive_active(epoch: usize, phase: Phase, cfg: &TrainConfig) -> bool {
    epoch >= cfg.n_nll && phase == Phase::Sis
}

/// `nll` before `n_nll` (or outside SIS), `nll + lambda * contras` after.
pub fn combined_loss(epoch: usize, phase: Phase, nll: f64, contras: Option<f64>, cfg: &TrainConfig) -> f64 {
    match contras {
        Some(c) if contrastive_active(epoch, phase, cfg) => nll + cfg.lambda * c,
        _ => nll,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub val_loss: f64,
    pub next: Phase,
}

/// Phase scheduler: DII until validation loss plateaus, then SIS until it
/// plateaus, and back. A DII segment that follows a SIS segment and
/// plateaus without setting a new global best ends training.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumState {
    pub phase: Phase,
    pub best_dii: Option<f64>,
    pub best_sis: Option<f64>,
    pub best_global: Option<f64>,
    pub plateau_counter: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// The current DII segment was entered from SIS.
    pub returned: bool,
    /// The current segment set a new global best.
    pub segment_improved: bool,
    pub history: Vec<CurriculumRecord>,
}

impl CurriculumState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            phase: Phase::Dii,
            best_dii: None,
            best_sis: None,
            best_global: None,
            plateau_counter: 0,
            patience,
            min_delta,
            returned: false,
            segment_improved: false,
            history: Vec::new(),
        }
    }

    pub fn step(&mut self, val_loss: f64) -> Result<Phase> {
        *self = curriculum_step(self, val_loss)?;
        Ok(self.phase)
    }

    pub fn phase_sequence(&self) -> Vec<Phase> {
        let mut v: Vec<Phase> = self.history.iter().map(|r| r.phase).collect();
        if let Some(last) = self.history.last() {
            v.push(last.next);
        }
        v.dedup();
        v
    }
}

pub fn curriculum_step(state: &CurriculumState, val_loss: f64) -> Result<CurriculumState> {
    let mut s = state.clone();
    let improves = |best: Option<f64>| best.is_none_or(|b| val_loss < b - state.min_delta);
    let best = match s.phase {
        Phase::Dii => &mut s.best_dii,
        Phase::Sis => &mut s.best_sis,
        Phase::Stopped => return Err(Error::CurriculumStopped),
    };
    if improves(*best) {
        *best = Some(val_loss);
        s.plateau_counter = 0;
    } else {
        s.plateau_counter += 1;
    }
    if improves(s.best_global) {
        s.best_global = Some(val_loss);
        s.segment_improved = true;
    }
    let from = s.phase;
    if s.plateau_counter >= s.patience {
        s.phase = match from {
            Phase::Dii if s.returned && !s.segment_improved => Phase::Stopped,
            Phase::Dii => Phase::Sis,
            _ => {
                s.returned = true;
                Phase::Dii
            }
        };
        s.plateau_counter = 0;
        s.segment_improved = false;
    }
    s.history.push(CurriculumRecord {
        epoch: state.history.len(),
        phase: from,
        val_loss,
        next: s.phase,
    });
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 1300,
        }
    }
}

impl AdamConfig {
    /// Linear ramp from 0 at step 0 to `lr` at `warmup_steps`, then constant.
    pub fn effective_lr(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
    updates: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            updates: 0,
        }
    }

    /// Applies the accumulated gradients of `params` at `step`. Returns
    /// `false` (and leaves everything untouched) when a gradient is not finite.
    pub fn update(&mut self, params: &mut ParamSet<T>, step: u64) -> bool {
        if params.iter().any(|p| p.grad.as_ref().is_some_and(|g| !g.is_finite())) {
            log::warn!("non-finite gradient at step {step}; update skipped");
            return false;
        }
        let lr = self.config.effective_lr(step);
        self.updates += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.updates));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.updates));
        let (lr, wd, eps) = (T::from_f64(lr), T::from_f64(c.weight_decay), T::from_f64(c.eps));
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            let Some(grad) = p.grad.as_ref() else { continue };
            if !p.requires_grad {
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); grad.numel()], vec![T::zero(); grad.numel()]));
            for (((w, &gr), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * gr;
                *v = b2 * *v + (T::one() - b2) * gr * gr;
                let (mh, vh) = (*m / bc1, *v / bc2);
                *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
            }
        }
        true
    }
}

/// One teacher-forced training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_id: String,
    pub feature: FeatureVector,
    pub context_tokens: Vec<u32>,
    /// Text feature of the context, for [`ContextMode::Before`].
    pub context_feature: FeatureVector,
    /// Sentence followed by EOS.
    pub target: Vec<u32>,
}

impl Example {
    pub fn prompt_context(&self, mode: ContextMode) -> PromptContext<'_> {
        match mode {
            ContextMode::None => PromptContext::None,
            ContextMode::Before => PromptContext::Before(&self.context_feature),
            ContextMode::After => PromptContext::After(&self.context_tokens),
        }
    }
}

/// Context tokens for the next sentence of a story: nothing when `l` is 0,
/// the album title and description before the first sentence, otherwise
/// the last `min(i, l)` sentences.
pub fn sentence_context(album_context: &[u32], previous: &[Vec<u32>], l: usize) -> Vec<u32> {
    if l == 0 {
        return Vec::new();
    }
    if previous.is_empty() {
        return album_context.to_vec();
    }
    previous[previous.len().saturating_sub(l)..].concat()
}

/// Examples of one split for one phase. SIS examples carry ground-truth
/// previous sentences as context; DII examples carry an empty context.
pub fn build_examples(split: &Split, phase: Phase, cfg: &TrainConfig, encoder: &EncoderStub, features: &FeatureSource) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let make = |image_id: &str, context_tokens: Vec<u32>, sentence: &[u32]| -> Result<Example> {
        let mut target = sentence.to_vec();
        target.push(EOS);
        Ok(Example {
            image_id: image_id.into(),
            feature: features.image(image_id)?,
            context_feature: encoder.encode_text(&context_tokens),
            context_tokens,
            target,
        })
    };
    match phase {
        Phase::Dii => {
            for s in &split.dii {
                out.push(make(&s.image_id, Vec::new(), s.caption.ids())?);
            }
        }
        Phase::Sis => {
            for story in &split.sis {
                let album = story.album_context();
                let mut previous: Vec<Vec<u32>> = Vec::new();
                for (image_id, sentence) in story.image_ids.iter().zip(&story.sentences) {
                    let ctx = sentence_context(&album, &previous, cfg.context_sentences);
                    out.push(make(image_id, ctx, sentence.ids())?);
                    previous.push(sentence.0.clone());
                }
            }
        }
        Phase::Stopped => {}
    }
    Ok(out)
}

/// Loss terms of one batch on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    /// Batch mean of per-sample summed NLL.
    pub nll: Var,
    pub contras: Option<Var>,
    /// What the optimizer minimizes.
    pub total: Var,
}

/// Teacher-forced forward pass over `batch`. The contrastive term pairs each
/// image feature with the projected mean hidden state of its target span.
pub fn batch_loss<'a, T: Real>(
    model: &'a PrefixModel<T>,
    g: &mut Graph<'a, T>,
    batch: &[&Example],
    cfg: &TrainConfig,
    contrastive: bool,
) -> Result<BatchLoss> {
    let max_rows = model.lm.config().max_positions.saturating_sub(cfg.max_len);
    let mut nll_sum: Option<Var> = None;
    let mut reps = Vec::new();
    for ex in batch {
        let prompt = model.mapping.prompt(g, &model.lm, &ex.feature, ex.prompt_context(cfg.context_mode), max_rows)?;
        let input = assemble_input(g, &model.lm, prompt.rows, &ex.target)?;
        let hidden = model.lm.forward(g, input.inputs)?;
        let logits = model.lm.logits(g, hidden)?;
        let nll = nll_loss(g, logits, &input.targets)?;
        nll_sum = Some(match nll_sum {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
        if contrastive {
            reps.push(model.mapping.project_text(g, hidden, &input.mask_positions())?);
        }
    }
    let nll_sum = nll_sum.ok_or(Error::BatchTooSmall(0))?;
    let nll = g.scale(nll_sum, T::from_f64(1.0 / batch.len() as f64));
    if !contrastive {
        return Ok(BatchLoss { nll, contras: None, total: nll });
    }
    let rows: Vec<Vec<T>> = batch
        .iter()
        .map(|ex| ex.feature.values().iter().map(|&v| T::from_f64(v as f64)).collect())
        .collect();
    let images = g.constant_owned(Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())?);
    let texts = g.concat_rows(&reps)?;
    let contras = infonce_loss(g, images, texts, cfg.tau, cfg.include_positive_in_denominator)?;
    let weighted = g.scale(contras, T::from_f64(cfg.lambda));
    let total = g.add(nll, weighted)?;
    Ok(BatchLoss {
        nll,
        contras: Some(contras),
        total,
    })
}

/// Mean per-sample summed NLL, without gradients.
pub fn validation_loss(model: &PrefixModel, examples: &[Example], cfg: &TrainConfig) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let l = batch_loss(model, &mut g, &[ex], cfg, false)?;
        total += g.scalar(l.nll) as f64;
    }
    Ok(Some(total / examples.len() as f64))
}

/// Splits `n` shuffled indices into batches; a trailing batch of one is
/// merged into the previous batch so contrastive batches always have negatives.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub nll: f64,
    pub contras: Option<f64>,
    pub combined: f64,
    pub lr: f64,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over the epoch's steps.
    pub nll: f64,
    pub contras: Option<f64>,
    pub combined: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub curriculum: Option<CurriculumState>,
    pub skipped_steps: usize,
}

/// Trains the mapping network of `model` on `data`. Only mapping-network
/// parameters change; `observe` sees every step and epoch record as it happens.
pub fn train(
    cfg: &TrainConfig,
    model: &mut PrefixModel,
    data: &DatasetSplits,
    encoder: &EncoderStub,
    features: &FeatureSource,
    observe: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainReport> {
    cfg.validate()?;
    let phases: &[Phase] = if cfg.curriculum { &[Phase::Dii, Phase::Sis] } else { &[Phase::Sis] };
    let mut train_sets = [Vec::new(), Vec::new()];
    let mut val_sets = [Vec::new(), Vec::new()];
    for &phase in phases {
        let i = phase_index(phase);
        train_sets[i] = build_examples(&data.train, phase, cfg, encoder, features)?;
        val_sets[i] = build_examples(&data.val, phase, cfg, encoder, features)?;
        if train_sets[i].is_empty() {
            return Err(Error::Dataset(format!("training split has no {} samples", phase.as_str())));
        }
        if cfg.curriculum && val_sets[i].is_empty() {
            return Err(Error::Dataset(format!(
                "curriculum needs {} validation samples; the validation split has none",
                phase.as_str()
            )));
        }
    }

    let mut adam = Adam::new(cfg.adam());
    let mut shuffle = rng::labeled(cfg.seed, b"batch-order");
    let mut curriculum = cfg.curriculum.then(|| CurriculumState::new(cfg.patience, cfg.min_delta));
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: Vec::new(),
        curriculum: None,
        skipped_steps: 0,
    };
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let phase = curriculum.as_ref().map_or(Phase::Sis, |c| c.phase);
        if phase == Phase::Stopped {
            break;
        }
        let examples = &train_sets[phase_index(phase)];
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle);
        let contrastive = contrastive_active(epoch, phase, cfg);
        let (mut nll_acc, mut contras_acc, mut comb_acc, mut n_steps) = (0.0, 0.0, 0.0, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let use_contrastive = contrastive && batch.len() >= 2;
            let (nll, contras, grads) = {
                let mut g = Graph::new();
                let loss = batch_loss(model, &mut g, &batch, cfg, use_contrastive)?;
                let nll = g.scalar(loss.nll) as f64;
                let contras = loss.contras.map(|c| g.scalar(c) as f64);
                (nll, contras, g.backward(loss.total)?)
            };
            let params = model.params_mut();
            params.accumulate(&grads);
            let applied = adam.update(params, step);
            params.zero_grad();
            if !applied {
                report.skipped_steps += 1;
            }
            let rec = StepRecord {
                step,
                epoch,
                phase,
                nll,
                contras,
                combined: combined_loss(epoch, phase, nll, contras, cfg),
                lr: adam.config.effective_lr(step),
                applied,
            };
            nll_acc += nll;
            contras_acc += contras.unwrap_or(0.0);
            comb_acc += rec.combined;
            n_steps += 1;
            observe(&TrainEvent::Step(rec.clone()));
            report.steps.push(rec);
            step += 1;
        }
        let val_loss = validation_loss(model, &val_sets[phase_index(phase)], cfg)?;
        let n = n_steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            phase,
            nll: nll_acc / n,
            contras: contrastive.then_some(contras_acc / n),
            combined: comb_acc / n,
            val_loss,
        };
        log::info!(
            "epoch {epoch} [{}] nll {:.4} combined {:.4} val {:?}",
            phase.as_str(),
            rec.nll,
            rec.combined,
            rec.val_loss
        );
        observe(&TrainEvent::Epoch(rec.clone()));
        report.epochs.push(rec);
        if let (Some(c), Some(v)) = (curriculum.as_mut(), val_loss) {
            let next = c.step(v)?;
            if next != phase {
                log::info!("curriculum: {} -> {}", phase.as_str(), next.as_str());
            }
        }
    }
    report.curriculum = curriculum;
    Ok(report)
}

fn phase_index(p: Phase) -> usize {
    match p {
        Phase::Dii => 0,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains a language model on `[BOS] sentence [EOS]` sequences and returns
/// it frozen, with the mean per-token loss of every epoch.
pub fn pretrain_lm(
    config: LmConfig,
    sentences: &[Vec<u32>],
    cfg: &PretrainConfig,
    observe: &mut dyn FnMut(usize, f64),
) -> Result<(LanguageModel, Vec<f64>)> {
    if sentences.is_empty() {
        return Err(Error::Dataset("no sentences to pretrain on".into()));
    }
    let mut lm = LanguageModel::<f32>::new(config, cfg.seed)?;
    let seqs: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(s.len() + 2);
            v.push(BOS);
            v.extend_from_slice(s);
            v.push(EOS);
            v.truncate(config.max_positions + 1);
            v
        })
        .collect();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_steps: cfg.warmup_steps,
        ..AdamConfig::default()
    });
    let mut shuffle = rng::labeled(cfg.seed, b"pretrain-order");
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut shuffle);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let grads = {
                let mut g = Graph::new();
                let mut acc: Option<Var> = None;
                let mut tokens = 0usize;
                for &i in idx {
                    let s = &seqs[i];
                    let x = lm.token_rows(&mut g, &s[..s.len() - 1])?;
                    let h = lm.forward(&mut g, x)?;
                    let l = lm.logits(&mut g, h)?;
                    let targets: Vec<(usize, usize)> = s[1..].iter().enumerate().map(|(p, &t)| (p, t as usize)).collect();
                    let nll = g.cross_entropy(l, &targets)?;
                    tokens += targets.len();
                    acc = Some(match acc {
                        None => nll,
                        Some(a) => g.add(a, nll)?,
                    });
                }
                let sum = acc.expect("non-empty batch");
                total += g.scalar(sum) as f64;
                count += tokens;
                let loss = g.scale(sum, 1.0 / tokens as f32);
                g.backward(loss)?
            };
            let params = lm.params_mut();
            params.accumulate(&grads);
            adam.update(params, step);
            params.zero_grad();
            step += 1;
        }
        let mean = total / count as f64;
        observe(epoch, mean);
        losses.push(mean);
    }
    lm.freeze();
    Ok((lm, losses))
}

/// One path of the mapping-network gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// Five-point stencil at step 1e-3, three coordinates per tensor.
pub fn suite_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-3,
        coords_per_param: 3,
        seed,
        five_point: true,
    }
}

/// Finite-difference check of the mapping-network gradients, in f64, on a
/// small random model: both context variants, with and without the
/// contrastive term. `paper_shape` uses an 8-layer, 8-head trunk.
/// [`suite_options`] gives the settings used by the command-line check.
pub fn mapping_gradcheck_suite(paper_shape: bool, opts: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let lm_config = LmConfig {
        vocab_size: 24,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        max_positions: 40,
    };
    let mut map_config = MappingConfig {
        d_feat: 8,
        d_model: 16,
        prefix_len: 4,
        clip_len: 4,
        n_layers: 2,
        n_heads: 4,
        mlp_ratio: 2,
    };
    if paper_shape {
        map_config = map_config.paper_shape();
    }
    let lm = LanguageModel::<f32>::new(lm_config, opts.seed)?;
    let mapping = MappingNetwork::<f32>::new(map_config, opts.seed.wrapping_add(1))?;
    let mut model = PrefixModel::new(lm, mapping)?.cast::<f64>();

    let encoder = EncoderStub::new(crate::encoder::EncoderConfig {
        d_feat: 8,
        text_dim: 8,
        vocab_size: 24,
        seed: opts.seed,
    });
    let mut r = rng::labeled(opts.seed, b"gradcheck-examples");
    let examples: Vec<Example> = (0..3)
        .map(|i| {
            let len = 2 + i;
            let tokens = |r: &mut rng::Rng, n: usize| -> Vec<u32> { (0..n).map(|_| r.random_range(4..24)).collect() };
            let context_tokens = tokens(&mut r, i + 1);
            let mut target = tokens(&mut r, len);
            target.push(EOS);
            Example {
                image_id: format!("img{i}"),
                feature: encoder.encode_image(&format!("img{i}")),
                context_feature: encoder.encode_text(&context_tokens),
                context_tokens,
                target,
            }
        })
        .collect();
    let batch: Vec<&Example> = examples.iter().collect();

    let mut out = Vec::new();
    for mode in [ContextMode::Before, ContextMode::After] {
        for contrastive in [false, true] {
            let cfg = TrainConfig {
                context_mode: mode,
                lambda: 0.3,
                max_len: 8,
                ..TrainConfig::default()
            };
            let report = grad_check(&mut model, |m, g| Ok(batch_loss(m, g, &batch, &cfg, contrastive)?.total), opts)?;
            out.push(GradCheckCase {
                name: format!("{}/{}", mode.as_str(), if contrastive { "nll+infonce" } else { "nll" }),
                report,
            });
        }
    }
    Ok(out)
}
