//! Frozen stand-in for a contrastive image/text encoder.
//!
//! Image features are hash-seeded Gaussian draws; text features are a frozen
//! random projection of mean-pooled random token embeddings. Both live in the
//! same `d_feat`-dimensional unit sphere.

use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, UNK};

/// Longest text the encoder reads; the excess is discarded.
pub const MAX_TEXT_TOKENS: usize = 77;

/// Unit-norm feature in the shared image/text space.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    /// Normalizes `values` to unit L2 norm.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let norm = Float::sqrt(kernels::dot(&values, &values));
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Config(format!("cannot normalize a vector of norm {norm}")));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f32 {
        Float::sqrt(kernels::dot(&self.0, &self.0))
    }

    pub fn cosine(&self, other: &FeatureVector) -> f32 {
        cosine(&self.0, &other.0)
    }

    pub fn to_row(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }

    fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::FeatureDim {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = Float::sqrt(kernels::dot(a, a));
    let nb = Float::sqrt(kernels::dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    kernels::dot(a, b) / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_feat: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_feat: 64,
            text_dim: 64,
            vocab_size: 256,
            seed: 0,
        }
    }
}

/// Deterministic image feature for `(image_id, seed)`.
pub fn synthetic_image_feature(image_id: &str, seed: u64, d_feat: usize) -> FeatureVector {
    let mut label = Vec::with_capacity(6 + image_id.len());
    label.extend_from_slice(b"image:");
    label.extend_from_slice(image_id.as_bytes());
    let mut r = rng::labeled(seed, &label);
    let v = rng::gaussian_vec(&mut r, d_feat, 1.0).into_iter().map(|x| x as f32).collect();
    FeatureVector::normalized(v).expect("gaussian draw has nonzero norm")
}

#[derive(Clone, Debug)]
pub struct EncoderStub {
    config: EncoderConfig,
    token_table: Tensor,
    text_projection: Tensor,
}

impl EncoderStub {
    pub fn new(config: EncoderConfig) -> Self {
        let mut r = rng::labeled(config.seed, b"text-encoder");
        let token_table = rng::gaussian_tensor(&mut r, &[config.vocab_size, config.text_dim], 1.0);
        let std = 1.0 / Float::sqrt(config.text_dim as f64);
        let text_projection = rng::gaussian_tensor(&mut r, &[config.text_dim, config.d_feat], std);
        Self {
            config,
            token_table,
            text_projection,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_feat(&self) -> usize {
        self.config.d_feat
    }

    /// Frozen tensors, for checksumming.
    pub fn frozen_tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("encoder.token_table", &self.token_table), ("encoder.text_projection", &self.text_projection)]
    }

    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.frozen_tensors() {
            crate::param::hash_tensor(&mut h, name, t);
        }
        h.finalize().into()
    }

    pub fn encode_image(&self, image_id: &str) -> FeatureVector {
        synthetic_image_feature(image_id, self.config.seed, self.config.d_feat)
    }

    /// Text feature of the first [`MAX_TEXT_TOKENS`] tokens. An empty input
    /// yields the zero-context feature (BOS alone).
    pub fn encode_text(&self, tokens: &[u32]) -> FeatureVector {
        let tokens = if tokens.is_empty() { &[BOS][..] } else { &tokens[..tokens.len().min(MAX_TEXT_TOKENS)] };
        let dim = self.config.text_dim;
        let mut pooled = alloc::vec![0.0f32; dim];
        for &id in tokens {
            let id = if (id as usize) < self.config.vocab_size { id } else { UNK };
            kernels::axpy(1.0, self.token_table.row(id as usize), &mut pooled);
        }
        let inv = 1.0 / tokens.len() as f32;
        pooled.iter_mut().for_each(|v| *v *= inv);
        let mut out = alloc::vec![0.0f32; self.config.d_feat];
        kernels::matmul_acc(&pooled, self.text_projection.data(), &mut out, 1, dim, self.config.d_feat);
        FeatureVector::normalized(out).expect("projection of a nonzero pooled embedding")
    }

    pub fn zero_context(&self) -> FeatureVector {
        self.encode_text(&[])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Loaded,
}

/// Image features by id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    provenance: Provenance,
    features: BTreeMap<String, FeatureVector>,
}

impl FeatureTable {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            provenance,
            features: BTreeMap::new(),
        }
    }

    /// Builds a loaded table from raw records. Vectors whose norm is off by
    /// more than 1e-3 are re-normalized.
    pub fn from_records(records: impl IntoIterator<Item = (String, Vec<f32>)>, expected_dim: usize) -> Result<Self> {
        let mut table = Self::new(expected_dim, Provenance::Loaded);
        for (id, values) in records {
            if values.len() != expected_dim {
                return Err(Error::Dataset(format!(
                    "feature `{id}` has dimension {} but {expected_dim} is configured",
                    values.len()
                )));
            }
            let norm = Float::sqrt(kernels::dot(&values, &values));
            let fv = if (norm - 1.0).abs() > 1e-3 {
                FeatureVector::normalized(values).map_err(|_| Error::Dataset(format!("feature `{id}` has zero norm")))?
            } else {
                FeatureVector(values)
            };
            table.insert(id, fv)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, id: String, fv: FeatureVector) -> Result<()> {
        fv.check_dim(self.dim)?;
        if self.features.contains_key(&id) {
            return Err(Error::Dataset(format!("duplicate feature id `{id}`")));
        }
        self.features.insert(id, fv);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.features.get(id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureVector)> {
        self.features.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Where image features come from at training and generation time.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSource<'a> {
    pub encoder: &'a EncoderStub,
    pub table: Option<&'a FeatureTable>,
    /// Fall back to hash-seeded features for ids missing from `table`.
    pub allow_synthetic: bool,
}

impl<'a> FeatureSource<'a> {
    pub fn synthetic(encoder: &'a EncoderStub) -> Self {
        Self {
            encoder,
            table: None,
            allow_synthetic: true,
        }
    }

    pub fn with_table(encoder: &'a EncoderStub, table: &'a FeatureTable, allow_synthetic: bool) -> Self {
        Self {
            encoder,
            table: Some(table),
            allow_synthetic,
        }
    }

    pub fn image(&self, id: &str) -> Result<FeatureVector> {
        if let Some(fv) = self.table.and_then(|t| t.get(id)) {
            fv.check_dim(self.encoder.d_feat())?;
            return Ok(fv.clone());
        }
        if self.allow_synthetic {
            Ok(self.encoder.encode_image(id))
        } else {
            Err(Error::UnknownImage(id.into()))
        }
    }
}
