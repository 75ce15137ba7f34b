//! The trainable mapping network: frozen features in, soft prefixes out.
//!
//! `k` learnable query vectors are appended to `clip_len` slots projected
//! from the input feature(s) and the whole sequence runs through a
//! bidirectional transformer trunk; the outputs at the query positions are
//! the prefix. Context can be fused into the input (`Before`) or appended
//! after the prefix as `[bos_text; token embeddings; eos_text]` (`After`).

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::param::{HasParams, ParamId, ParamSet};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::BlockParams;

pub const MAPPING_PARAM_TAG: u32 = 2;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MappingConfig {
    pub d_feat: usize,
    /// Width of the language model's embedding space.
    pub d_model: usize,
    /// Number of soft prefix vectors `k`.
    pub prefix_len: usize,
    /// Number of input slots produced by the input projection.
    pub clip_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            d_feat: 64,
            d_model: 64,
            prefix_len: 20,
            clip_len: 20,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl MappingConfig {
    /// Eight trunk layers with eight heads each.
    pub fn paper_shape(self) -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_feat, self.d_model, self.prefix_len, self.clip_len, self.n_layers, self.n_heads, self.mlp_ratio];
        if dims.contains(&0) {
            return Err(Error::Config(format!("mapping network dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "mapping d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Tensor {
        let v = [self.d_feat, self.d_model, self.prefix_len, self.clip_len, self.n_layers, self.n_heads, self.mlp_ratio];
        Tensor::new(vec![7], v.iter().map(|&x| x as f32).collect()).unwrap()
    }

    pub fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 7 {
            return Err(Error::Config("mapping config record must have 7 entries".into()));
        }
        let c = Self {
            d_feat: d[0] as usize,
            d_model: d[1] as usize,
            prefix_len: d[2] as usize,
            clip_len: d[3] as usize,
            n_layers: d[4] as usize,
            n_heads: d[5] as usize,
            mlp_ratio: d[6] as usize,
        };
        c.validate()?;
        Ok(c)
    }
}

/// How previous sentences reach the language model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContextMode {
    #[default]
    None,
    /// Context feature concatenated with the image feature before the network.
    Before,
    /// Context token embeddings appended after the prefix.
    After,
}

impl ContextMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "before" => Some(Self::Before),
            "after" => Some(Self::After),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Before => "before",
            Self::After => "after",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixLayout {
    PrefixOnly,
    PrefixThenContext,
    ContextFused,
}

/// Concrete prompt rows handed to the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSequence {
    pub vectors: Tensor,
    pub layout: PrefixLayout,
    pub prefix_len: usize,
}

impl PrefixSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Context for one prompt, already resolved for the chosen mode.
#[derive(Clone, Copy, Debug)]
pub enum PromptContext<'c> {
    None,
    Before(&'c FeatureVector),
    After(&'c [u32]),
}

/// Prompt rows on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub rows: Var,
    pub layout: PrefixLayout,
    /// Context tokens dropped from the left to fit the position budget.
    pub truncated: usize,
}

/// Language-model input with the positions whose logits are scored.
#[derive(Clone, Debug)]
pub struct AssembledInput {
    pub inputs: Var,
    pub len: usize,
    /// `(position, target id)`: the logits at `position` predict the target.
    pub targets: Vec<(usize, usize)>,
}

impl AssembledInput {
    pub fn mask_positions(&self) -> Vec<usize> {
        self.targets.iter().map(|&(p, _)| p).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MappingNetwork<T: Real = f32> {
    config: MappingConfig,
    params: ParamSet<T>,
    proj_single_w: ParamId,
    proj_single_b: ParamId,
    proj_pair_w: ParamId,
    proj_pair_b: ParamId,
    queries: ParamId,
    trunk: Vec<BlockParams>,
    bos_text: ParamId,
    eos_text: ParamId,
    text_proj_w: ParamId,
    text_proj_b: ParamId,
}

impl<T: Real> HasParams<T> for MappingNetwork<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> MappingNetwork<T> {
    pub fn new(config: MappingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::labeled(seed, b"mapping-network");
        let mut ps = ParamSet::new(MAPPING_PARAM_TAG);
        let (d, f, slots) = (config.d_model, config.d_feat, config.clip_len * config.d_model);
        let proj_single_w = ps.add("mapping.proj_single.weight", rng::gaussian_tensor(&mut r, &[f, slots], INIT_STD), true);
        let proj_single_b = ps.add("mapping.proj_single.bias", Tensor::zeros(&[slots]), true);
        let proj_pair_w = ps.add("mapping.proj_pair.weight", rng::gaussian_tensor(&mut r, &[2 * f, slots], INIT_STD), true);
        let proj_pair_b = ps.add("mapping.proj_pair.bias", Tensor::zeros(&[slots]), true);
        let queries = ps.add("mapping.queries", rng::gaussian_tensor(&mut r, &[config.prefix_len, d], INIT_STD), true);
        let trunk = (0..config.n_layers)
            .map(|i| {
                BlockParams::init(&mut ps, &mut r, &format!("mapping.trunk.{i}"), d, config.mlp_ratio * d, INIT_STD, INIT_STD, true)
            })
            .collect();
        // two fixed, distinct streams
        let bos = rng::gaussian_tensor(&mut rng::labeled(seed, b"mapping-bos"), &[d], INIT_STD);
        let eos = rng::gaussian_tensor(&mut rng::labeled(seed, b"mapping-eos"), &[d], INIT_STD);
        let bos_text = ps.add("mapping.bos_text", bos, true);
        let eos_text = ps.add("mapping.eos_text", eos, true);
        let text_proj_w = ps.add("mapping.text_projection.weight", rng::gaussian_tensor(&mut r, &[d, f], INIT_STD), true);
        let text_proj_b = ps.add("mapping.text_projection.bias", Tensor::zeros(&[f]), true);
        Ok(Self {
            config,
            params: ps,
            proj_single_w,
            proj_single_b,
            proj_pair_w,
            proj_pair_b,
            queries,
            trunk,
            bos_text,
            eos_text,
            text_proj_w,
            text_proj_b,
        })
    }

    /// Rebuilds a network from named `mapping.*` parameters.
    pub fn from_params(config: MappingConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = net.params.get(id).name.clone();
            let src = params.find(&name).ok_or_else(|| Error::Incompatible {
                what: "mapping network checkpoint",
                expected: name.clone(),
                found: "no such tensor".to_string(),
            })?;
            let loaded = params.value(src);
            let slot = net.params.get_mut(id);
            if loaded.shape() != slot.value.shape() {
                return Err(Error::Incompatible {
                    what: "mapping network tensor shape",
                    expected: format!("{name} {:?}", slot.value.shape()),
                    found: format!("{:?}", loaded.shape()),
                });
            }
            slot.value = loaded.clone();
        }
        Ok(net)
    }

    pub fn config(&self) -> &MappingConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> MappingNetwork<U> {
        MappingNetwork {
            config: self.config,
            params: self.params.cast(),
            proj_single_w: self.proj_single_w,
            proj_single_b: self.proj_single_b,
            proj_pair_w: self.proj_pair_w,
            proj_pair_b: self.proj_pair_b,
            queries: self.queries,
            trunk: self.trunk.clone(),
            bos_text: self.bos_text,
            eos_text: self.eos_text,
            text_proj_w: self.text_proj_w,
            text_proj_b: self.text_proj_b,
        }
    }

    pub fn bos_text(&self) -> &Tensor<T> {
        self.params.value(self.bos_text)
    }

    pub fn eos_text(&self) -> &Tensor<T> {
        self.params.value(self.eos_text)
    }

    /// Overwrites the special context rows (used by equivalence tests).
    pub fn set_special_rows(&mut self, bos: Tensor<T>, eos: Tensor<T>) {
        self.params.get_mut(self.bos_text).value = bos;
        self.params.get_mut(self.eos_text).value = eos;
    }

    fn feature_row(&self, v: &FeatureVector) -> Result<Tensor<T>> {
        if v.dim() != self.config.d_feat {
            return Err(Error::FeatureDim {
                expected: self.config.d_feat,
                found: v.dim(),
            });
        }
        Ok(Tensor::row_vector(v.values().iter().map(|&x| T::from_f64(x as f64)).collect()))
    }

    fn trunk<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (wv, bv) = (self.params.var(g, w), self.params.var(g, b));
        let slots = g.matmul(x, wv)?;
        let slots = g.add_row(slots, bv)?;
        let slots = g.reshape(slots, &[self.config.clip_len, self.config.d_model])?;
        let q = self.params.var(g, self.queries);
        let mut h = g.concat_rows(&[slots, q])?;
        for b in &self.trunk {
            h = b.forward(&self.params, g, h, self.config.n_heads, false)?;
        }
        g.slice_rows(h, self.config.clip_len, self.config.prefix_len)
    }

    /// `k` prefix vectors from an image feature.
    pub fn map_prefix<'a>(&'a self, g: &mut Graph<'a, T>, v: &FeatureVector) -> Result<Var> {
        let x = g.constant_owned(self.feature_row(v)?);
        self.trunk(g, x, self.proj_single_w, self.proj_single_b)
    }

    /// `k` prefix vectors from the concatenation of an image feature and a
    /// context feature.
    pub fn map_prefix_with_context<'a>(&'a self, g: &mut Graph<'a, T>, v: &FeatureVector, c: &FeatureVector) -> Result<Var> {
        let (a, b) = (self.feature_row(v)?, self.feature_row(c)?);
        let mut data = a.into_data();
        data.extend(b.into_data());
        let x = g.constant_owned(Tensor::row_vector(data));
        self.trunk(g, x, self.proj_pair_w, self.proj_pair_b)
    }

    /// `[bos_text; token embeddings; eos_text]`. At most `max_rows` rows are
    /// produced; excess context tokens are dropped from the left. Returns the
    /// rows and the number of dropped tokens.
    pub fn build_context_after<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        lm: &'a LanguageModel<T>,
        tokens: &[u32],
        max_rows: usize,
    ) -> Result<(Var, usize)> {
        let keep = max_rows.saturating_sub(2).min(tokens.len());
        let dropped = tokens.len() - keep;
        if dropped > 0 {
            log::warn!("context of {} tokens truncated to the most recent {keep}", tokens.len());
        }
        let d = self.config.d_model;
        let bos = self.params.var(g, self.bos_text);
        let bos = g.reshape(bos, &[1, d])?;
        let eos = self.params.var(g, self.eos_text);
        let eos = g.reshape(eos, &[1, d])?;
        let rows = if keep == 0 {
            g.concat_rows(&[bos, eos])?
        } else {
            let body = lm.token_rows(g, &tokens[dropped..])?;
            g.concat_rows(&[bos, body, eos])?
        };
        Ok((rows, dropped))
    }

    /// Prompt rows (prefix, plus context rows in `After` mode). `max_rows`
    /// bounds the whole prompt.
    pub fn prompt<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        lm: &'a LanguageModel<T>,
        image: &FeatureVector,
        context: PromptContext<'_>,
        max_rows: usize,
    ) -> Result<PromptVars> {
        self.check_lm(lm)?;
        match context {
            PromptContext::None => Ok(PromptVars {
                rows: self.map_prefix(g, image)?,
                layout: PrefixLayout::PrefixOnly,
                truncated: 0,
            }),
            PromptContext::Before(c) => Ok(PromptVars {
                rows: self.map_prefix_with_context(g, image, c)?,
                layout: PrefixLayout::ContextFused,
                truncated: 0,
            }),
            PromptContext::After(tokens) => {
                let prefix = self.map_prefix(g, image)?;
                let budget = max_rows.saturating_sub(self.config.prefix_len);
                let (ctx, truncated) = self.build_context_after(g, lm, tokens, budget)?;
                Ok(PromptVars {
                    rows: g.concat_rows(&[prefix, ctx])?,
                    layout: PrefixLayout::PrefixThenContext,
                    truncated,
                })
            }
        }
    }

    fn check_lm(&self, lm: &LanguageModel<T>) -> Result<()> {
        if lm.config().embed_dim != self.config.d_model {
            return Err(Error::Incompatible {
                what: "embedding width",
                expected: format!("{}", self.config.d_model),
                found: format!("{}", lm.config().embed_dim),
            });
        }
        Ok(())
    }

    /// Mean of `hidden` over `positions`, projected to `d_feat` and
    /// normalized to unit length.
    pub fn project_text<'a>(&'a self, g: &mut Graph<'a, T>, hidden: Var, positions: &[usize]) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::EmptyMask("project_text"));
        }
        let rows = g.gather_rows(hidden, positions)?;
        let pooled = g.mean_rows(rows);
        let (w, b) = (self.params.var(g, self.text_proj_w), self.params.var(g, self.text_proj_b));
        let p = g.matmul(pooled, w)?;
        let p = g.add_row(p, b)?;
        Ok(g.normalize_rows(p))
    }
}

/// Concatenates prompt rows and the embedded targets. The logits at the
/// position before each target token predict it.
pub fn assemble_input<'a, T: Real>(
    g: &mut Graph<'a, T>,
    lm: &'a LanguageModel<T>,
    prompt: Var,
    targets: &[u32],
) -> Result<AssembledInput> {
    let p = g.value(prompt).rows();
    let len = p + targets.len();
    let limit = lm.config().max_positions;
    if len > limit {
        return Err(Error::SequenceTooLong { len, limit });
    }
    if targets.is_empty() {
        return Err(Error::EmptyMask("assemble_input"));
    }
    let tok = lm.token_rows(g, targets)?;
    let inputs = g.concat_rows(&[prompt, tok])?;
    let targets = targets.iter().enumerate().map(|(j, &id)| (p + j - 1, id as usize)).collect();
    Ok(AssembledInput { inputs, len, targets })
}

impl MappingNetwork<f32> {
    /// Concrete prompt rows for inference.
    pub fn prefix_sequence(
        &self,
        lm: &LanguageModel<f32>,
        image: &FeatureVector,
        context: PromptContext<'_>,
        max_rows: usize,
    ) -> Result<(PrefixSequence, usize)> {
        let mut g = Graph::new();
        let p = self.prompt(&mut g, lm, image, context, max_rows)?;
        Ok((
            PrefixSequence {
                vectors: g.value(p.rows).clone(),
                layout: p.layout,
                prefix_len: self.config.prefix_len,
            },
            p.truncated,
        ))
    }
}

/// The frozen language model together with the trainable mapping network.
/// Only the mapping network's parameters are exposed as trainable.
#[derive(Clone, Debug)]
pub struct PrefixModel<T: Real = f32> {
    pub lm: LanguageModel<T>,
    pub mapping: MappingNetwork<T>,
}

impl<T: Real> PrefixModel<T> {
    pub fn new(mut lm: LanguageModel<T>, mapping: MappingNetwork<T>) -> Result<Self> {
        lm.freeze();
        mapping.check_lm(&lm)?;
        Ok(Self { lm, mapping })
    }

    pub fn cast<U: Real>(&self) -> PrefixModel<U> {
        PrefixModel {
            lm: self.lm.cast(),
            mapping: self.mapping.cast(),
        }
    }

    /// Names of every parameter that currently requires a gradient.
    pub fn trainable_names(&self) -> Vec<&str> {
        let mut v = self.lm.params().trainable_names();
        v.extend(self.mapping.params().trainable_names());
        v
    }
}

impl<T: Real> HasParams<T> for PrefixModel<T> {
    fn params(&self) -> &ParamSet<T> {
        self.mapping.params()
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.mapping.params_mut()
    }
}
