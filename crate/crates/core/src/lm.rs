//! Small GPT-style causal decoder used as the frozen language model.

use num_traits::Float;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::param::{HasParams, ParamId, ParamSet};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::BlockParams;

pub const LM_PARAM_TAG: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::preset("small").unwrap()
    }
}

impl LmConfig {
    /// Size ladder `small`/`medium`/`large`/`xl`.
    pub fn preset(name: &str) -> Option<Self> {
        let (embed_dim, n_layers) = match name {
            "small" => (64, 2),
            "medium" => (96, 3),
            "large" => (128, 4),
            "xl" => (160, 5),
            _ => return None,
        };
        Some(Self {
            vocab_size: 256,
            embed_dim,
            n_layers,
            n_heads: 4,
            max_positions: 128,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_positions == 0 {
            return Err(Error::Config(format!("language model dimensions must be positive: {self:?}")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Tensor {
        let v = [self.vocab_size, self.embed_dim, self.n_layers, self.n_heads, self.max_positions];
        Tensor::new(vec![5], v.iter().map(|&x| x as f32).collect()).unwrap()
    }

    pub fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 5 {
            return Err(Error::Config("language model config record must have 5 entries".into()));
        }
        let c = Self {
            vocab_size: d[0] as usize,
            embed_dim: d[1] as usize,
            n_layers: d[2] as usize,
            n_heads: d[3] as usize,
            max_positions: d[4] as usize,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Per-position logits and final-layer hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput {
    pub logits: Tensor,
    pub final_hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct LanguageModel<T: Real = f32> {
    config: LmConfig,
    params: ParamSet<T>,
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl<T: Real> HasParams<T> for LanguageModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> LanguageModel<T> {
    /// Freshly initialized, trainable model.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::labeled(seed, b"language-model");
        let mut ps = ParamSet::new(LM_PARAM_TAG);
        let d = config.embed_dim;
        let wte = ps.add("lm.wte", rng::gaussian_tensor(&mut r, &[config.vocab_size, d], 0.02), true);
        let wpe = ps.add("lm.wpe", rng::gaussian_tensor(&mut r, &[config.max_positions, d], 0.01), true);
        let residual_std = 0.02 / Float::sqrt((2 * config.n_layers) as f64);
        let blocks = (0..config.n_layers)
            .map(|i| BlockParams::init(&mut ps, &mut r, &format!("lm.h.{i}"), d, 4 * d, 0.02, residual_std, true))
            .collect();
        let lnf_g = ps.add("lm.ln_f.weight", Tensor::full(&[d], T::one()), true);
        let lnf_b = ps.add("lm.ln_f.bias", Tensor::zeros(&[d]), true);
        Ok(Self {
            config,
            params: ps,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    /// Rebuilds a model from named parameters (`lm.*`), e.g. a checkpoint.
    pub fn from_params(config: LmConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let fresh = Self::new(config, 0)?;
        let mut ps = ParamSet::new(LM_PARAM_TAG);
        for p in fresh.params.iter() {
            let id = params.find(&p.name).ok_or_else(|| Error::Incompatible {
                what: "language model checkpoint",
                expected: p.name.clone(),
                found: "no such tensor".to_string(),
            })?;
            let loaded = params.value(id);
            if loaded.shape() != p.value.shape() {
                return Err(Error::Incompatible {
                    what: "language model tensor shape",
                    expected: format!("{} {:?}", p.name, p.value.shape()),
                    found: format!("{:?}", loaded.shape()),
                });
            }
            ps.add(p.name.clone(), loaded.clone(), false);
        }
        let blocks = (0..config.n_layers)
            .map(|i| BlockParams::find(&ps, &format!("lm.h.{i}")).expect("names copied from a fresh model"))
            .collect();
        Ok(Self {
            config,
            wte: ps.find("lm.wte").unwrap(),
            wpe: ps.find("lm.wpe").unwrap(),
            lnf_g: ps.find("lm.ln_f.weight").unwrap(),
            lnf_b: ps.find("lm.ln_f.bias").unwrap(),
            blocks,
            params: ps,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn freeze(&mut self) {
        self.params.set_requires_grad(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.requires_grad)
    }

    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config,
            params: self.params.cast(),
            wte: self.wte,
            wpe: self.wpe,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&id| {
                if (id as usize) < self.config.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(Error::TokenOutOfRange {
                        id,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Raw token-embedding rows, without positions.
    pub fn token_rows<'a>(&'a self, g: &mut Graph<'a, T>, tokens: &[u32]) -> Result<Var> {
        let ids = self.check_tokens(tokens)?;
        let wte = self.params.var(g, self.wte);
        g.gather_rows(wte, &ids)
    }

    /// Token embeddings plus absolute position embeddings from position 0;
    /// exactly what [`Self::forward`] feeds its first block for pure-token input.
    pub fn embed_tokens<'a>(&'a self, g: &mut Graph<'a, T>, tokens: &[u32]) -> Result<Var> {
        let rows = self.token_rows(g, tokens)?;
        self.add_positions(g, rows)
    }

    fn add_positions<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let len = g.value(x).rows();
        if len > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                limit: self.config.max_positions,
            });
        }
        let positions: Vec<usize> = (0..len).collect();
        let wpe = self.params.var(g, self.wpe);
        let pos = g.gather_rows(wpe, &positions)?;
        g.add(x, pos)
    }

    /// Runs the decoder over `inputs` (`[len, embed_dim]`: soft prefixes
    /// and/or token rows) and returns the final-layer hidden states.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, inputs: Var) -> Result<Var> {
        if g.value(inputs).cols() != self.config.embed_dim || g.shape(inputs).len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "lm.forward",
                lhs: g.shape(inputs).to_vec(),
                rhs: vec![g.value(inputs).rows(), self.config.embed_dim],
            });
        }
        let mut x = self.add_positions(g, inputs)?;
        for b in &self.blocks {
            x = b.forward(&self.params, g, x, self.config.n_heads, true)?;
        }
        let (lg, lb) = (self.params.var(g, self.lnf_g), self.params.var(g, self.lnf_b));
        g.layer_norm(x, lg, lb)
    }

    /// Weight-tied output head.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a, T>, hidden: Var) -> Result<Var> {
        let wte = self.params.var(g, self.wte);
        g.matmul_nt(hidden, wte)
    }
}

impl LanguageModel<f32> {
    /// Inference over concrete input rows.
    pub fn run(&self, inputs: &Tensor) -> Result<LmOutput> {
        let mut g = Graph::new();
        let x = g.constant(inputs);
        let h = self.forward(&mut g, x)?;
        let l = self.logits(&mut g, h)?;
        Ok(LmOutput {
            logits: g.value(l).clone(),
            final_hidden: g.value(h).clone(),
        })
    }

    /// Inference over token ids.
    pub fn run_tokens(&self, tokens: &[u32]) -> Result<LmOutput> {
        let mut g = Graph::new();
        let x = self.token_rows(&mut g, tokens)?;
        let h = self.forward(&mut g, x)?;
        let l = self.logits(&mut g, h)?;
        Ok(LmOutput {
            logits: g.value(l).clone(),
            final_hidden: g.value(h).clone(),
        })
    }

    /// `exp` of the mean negative log-probability of every token after the first.
    pub fn perplexity(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::TooShort(tokens.len()));
        }
        let out = self.run_tokens(&tokens[..tokens.len() - 1])?;
        let lp = log_probs(&out.logits);
        let nll: f64 = tokens[1..]
            .iter()
            .enumerate()
            .map(|(t, &id)| -(lp.row(t)[id as usize] as f64))
            .sum();
        Ok(Float::exp(nll / (tokens.len() - 1) as f64))
    }
}

/// Row-wise log-softmax.
pub fn log_probs<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
        let lse = kernels::log_sum_exp(row);
        row.iter_mut().for_each(|x| *x -= lse);
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}
