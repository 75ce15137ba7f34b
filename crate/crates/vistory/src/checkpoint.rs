//! Versioned named-tensor container shared by every model file, plus the
//! language-model and prefix-model layouts built on it.
//!
//! Layout (little-endian): magic `VSTK`, `u32` version, `u32` record count,
//! then per record `u32` name length, UTF-8 name, `u8` dtype (0 = f32),
//! `u32` rank, `u64` per dimension, and the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use vistory_core::encoder::EncoderConfig;
use vistory_core::lm::{LanguageModel, LmConfig, LM_PARAM_TAG};
use vistory_core::mapping::{ContextMode, MappingConfig, MappingNetwork, PrefixModel, MAPPING_PARAM_TAG};
use vistory_core::tokenizer::Vocab;
use vistory_core::{HasParams, ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"VSTK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

const LM_META: &str = "lm.config";
const MAPPING_META: &str = "mapping.config";
const ENCODER_META: &str = "encoder.config";
const CONTEXT_META: &str = "train.context";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}, this build reads version {VERSION}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: tensor `{name}` has unsupported dtype tag {dtype}")]
    Dtype { path: PathBuf, name: String, dtype: u8 },
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}: missing tensor `{name}`")]
    Missing { path: PathBuf, name: String },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: vistory_core::Error },
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self, CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.into(), source };
        let malformed = |msg: String| CheckpointError::Malformed { path: path.into(), msg };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.into() });
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(CheckpointError::Version { path: path.into(), version });
        }
        let count = read_u32(r).map_err(io)?;
        let mut out = Checkpoint::default();
        for _ in 0..count {
            let len = read_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| malformed("tensor name is not UTF-8".into()))?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype).map_err(io)?;
            if dtype[0] != DTYPE_F32 {
                return Err(CheckpointError::Dtype { path: path.into(), name, dtype: dtype[0] });
            }
            let rank = read_u32(r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| malformed(format!("tensor `{name}`: {e}")))?;
            out.tensors.push((name, t));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.into(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = File::open(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::read_from(&mut BufReader::new(f), path)
    }

    fn require(&self, name: &str, path: &Path) -> Result<&Tensor, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing { path: path.into(), name: name.into() })
    }

    fn params_with_prefix(&self, prefix: &str, tag: u32) -> ParamSet {
        let mut ps = ParamSet::new(tag);
        for (name, t) in &self.tensors {
            if name.starts_with(prefix) && !name.ends_with(".config") {
                ps.add(name.clone(), t.clone(), false);
            }
        }
        ps
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Where the vocabulary of a model file lives: `<file>.vocab`.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<(), CheckpointError> {
    let mut text = vocab.words().join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

pub fn load_vocab(path: &Path) -> Result<Vocab, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    Ok(Vocab::from_words(text.lines().filter(|l| !l.is_empty()).map(String::from)))
}

fn model_err(path: &Path) -> impl Fn(vistory_core::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Model { path: path.into(), source }
}

fn add_lm(ck: &mut Checkpoint, lm: &LanguageModel) {
    ck.push(LM_META, lm.config().to_meta());
    for p in lm.params().iter() {
        ck.push(p.name.clone(), p.value.clone());
    }
}

fn read_lm(ck: &Checkpoint, path: &Path) -> Result<LanguageModel, CheckpointError> {
    let config = LmConfig::from_meta(ck.require(LM_META, path)?).map_err(model_err(path))?;
    let mut lm = LanguageModel::from_params(config, ck.params_with_prefix("lm.", LM_PARAM_TAG)).map_err(model_err(path))?;
    lm.freeze();
    Ok(lm)
}

/// Writes a language model and its vocabulary sidecar.
pub fn save_lm(path: &Path, lm: &LanguageModel, vocab: &Vocab) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::default();
    add_lm(&mut ck, lm);
    ck.save(path)?;
    save_vocab(&vocab_path(path), vocab)
}

/// Reads a frozen language model and its vocabulary.
pub fn load_lm(path: &Path) -> Result<(LanguageModel, Vocab), CheckpointError> {
    let ck = Checkpoint::load(path)?;
    let lm = read_lm(&ck, path)?;
    let vocab = load_vocab(&vocab_path(path))?;
    check_vocab(&lm, &vocab, path)?;
    Ok((lm, vocab))
}

fn check_vocab(lm: &LanguageModel, vocab: &Vocab, path: &Path) -> Result<(), CheckpointError> {
    if vocab.len() != lm.config().vocab_size {
        return Err(CheckpointError::Model {
            path: path.into(),
            source: vistory_core::Error::Incompatible {
                what: "vocabulary size",
                expected: lm.config().vocab_size.to_string(),
                found: vocab.len().to_string(),
            },
        });
    }
    Ok(())
}

/// Encodes a `u64` exactly as four 16-bit limbs in f32.
fn u64_to_meta(v: u64) -> [f32; 4] {
    [0, 16, 32, 48].map(|s| ((v >> s) & 0xffff) as f32)
}

fn u64_from_meta(d: &[f32]) -> u64 {
    d.iter().enumerate().map(|(i, &x)| (x as u64) << (16 * i)).sum()
}

fn encoder_meta(c: &EncoderConfig) -> Tensor {
    let mut v = vec![c.d_feat as f32, c.text_dim as f32, c.vocab_size as f32];
    v.extend(u64_to_meta(c.seed));
    Tensor::new(vec![7], v).unwrap()
}

fn encoder_from_meta(t: &Tensor, path: &Path) -> Result<EncoderConfig, CheckpointError> {
    let d = t.data();
    if d.len() != 7 {
        return Err(CheckpointError::Malformed { path: path.into(), msg: "encoder config record must have 7 entries".into() });
    }
    Ok(EncoderConfig {
        d_feat: d[0] as usize,
        text_dim: d[1] as usize,
        vocab_size: d[2] as usize,
        seed: u64_from_meta(&d[3..]),
    })
}

fn mode_code(m: ContextMode) -> f32 {
    match m {
        ContextMode::None => 0.0,
        ContextMode::Before => 1.0,
        ContextMode::After => 2.0,
    }
}

fn mode_from_code(c: f32) -> Option<ContextMode> {
    match c as u32 {
        0 => Some(ContextMode::None),
        1 => Some(ContextMode::Before),
        2 => Some(ContextMode::After),
        _ => None,
    }
}

/// Everything needed to decode with a trained model.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub model: PrefixModel,
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    /// Context mode and number of previous sentences used in training.
    pub context_mode: ContextMode,
    pub context_sentences: usize,
}

pub fn save_model(path: &Path, saved: &SavedModel) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::default();
    add_lm(&mut ck, &saved.model.lm);
    ck.push(MAPPING_META, saved.model.mapping.config().to_meta());
    for p in saved.model.mapping.params().iter() {
        ck.push(p.name.clone(), p.value.clone());
    }
    ck.push(ENCODER_META, encoder_meta(&saved.encoder));
    ck.push(
        CONTEXT_META,
        Tensor::new(vec![2], vec![mode_code(saved.context_mode), saved.context_sentences as f32]).unwrap(),
    );
    ck.save(path)?;
    save_vocab(&vocab_path(path), &saved.vocab)
}

pub fn load_model(path: &Path) -> Result<SavedModel, CheckpointError> {
    let ck = Checkpoint::load(path)?;
    let lm = read_lm(&ck, path)?;
    let mcfg = MappingConfig::from_meta(ck.require(MAPPING_META, path)?).map_err(model_err(path))?;
    let mapping = MappingNetwork::from_params(mcfg, ck.params_with_prefix("mapping.", MAPPING_PARAM_TAG)).map_err(model_err(path))?;
    let model = PrefixModel::new(lm, mapping).map_err(model_err(path))?;
    let encoder = encoder_from_meta(ck.require(ENCODER_META, path)?, path)?;
    let ctx = ck.require(CONTEXT_META, path)?.data().to_vec();
    let context_mode = ctx.first().and_then(|&c| mode_from_code(c)).ok_or_else(|| CheckpointError::Malformed {
        path: path.into(),
        msg: "bad training context record".into(),
    })?;
    let vocab = load_vocab(&vocab_path(path))?;
    check_vocab(&model.lm, &vocab, path)?;
    Ok(SavedModel {
        model,
        vocab,
        encoder,
        context_mode,
        context_sentences: ctx.get(1).copied().unwrap_or(0.0) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_exact() {
        let mut ck = Checkpoint::default();
        ck.push("a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, 7e9]).unwrap());
        ck.push("b.scalar", Tensor::scalar(0.1));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VSTK");
        let back = Checkpoint::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut ck = Checkpoint::default();
        ck.push("a", Tensor::scalar(1.0));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let p = Path::new("mem");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice(), p), Err(CheckpointError::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice(), p), Err(CheckpointError::Version { version: 9, .. })));
        let short = &buf[..buf.len() - 2];
        assert!(matches!(Checkpoint::read_from(&mut &short[..], p), Err(CheckpointError::Io { .. })));
    }

    #[test]
    fn seeds_survive_meta_encoding() {
        for v in [0u64, 1, 0xdead_beef_cafe_f00d, u64::MAX] {
            assert_eq!(u64_from_meta(&u64_to_meta(v)), v);
        }
    }
}
