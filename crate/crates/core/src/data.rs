//! Description-in-isolation (DII) and story (SIS) samples, tokenization and
//! the grammar-generated toy dataset.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::encoder::{synthetic_image_feature, EncoderStub, FeatureTable, FeatureVector, Provenance};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{TokenSequence, Vocab};

/// Images (and sentences) per story.
pub const STORY_LEN: usize = 5;

/// One image with an isolated caption, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiiRecord {
    pub image_id: String,
    pub caption: String,
}

/// One album story, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SisRecord {
    pub album_id: String,
    pub album_title: String,
    pub album_description: String,
    pub image_ids: Vec<String>,
    pub sentences: Vec<String>,
}

impl SisRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_ids.len() != STORY_LEN {
            return Err(Error::Dataset(format!(
                "album {}: expected {STORY_LEN} images, found {}",
                self.album_id,
                self.image_ids.len()
            )));
        }
        if self.sentences.len() != STORY_LEN {
            return Err(Error::Dataset(format!(
                "album {}: expected {STORY_LEN} sentences, found {}",
                self.album_id,
                self.sentences.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawSplit {
    pub dii: Vec<DiiRecord>,
    pub sis: Vec<SisRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawSplits {
    pub train: RawSplit,
    pub val: RawSplit,
    pub test: RawSplit,
}

impl RawSplits {
    pub fn split(&self, name: SplitName) -> &RawSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut RawSplit {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    /// Story shape and album disjointness across splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in SplitName::ALL {
            let mut here = BTreeSet::new();
            for s in &self.split(name).sis {
                s.validate()?;
                here.insert(s.album_id.as_str());
            }
            for id in &here {
                if !seen.insert(*id) {
                    return Err(Error::Dataset(format!("album {id} appears in more than one split")));
                }
            }
        }
        for name in SplitName::ALL {
            if let Some(d) = self.split(name).dii.iter().find(|d| d.caption.trim().is_empty()) {
                return Err(Error::Dataset(format!("image {}: empty caption", d.image_id)));
            }
        }
        Ok(())
    }

    /// Every text of the training split, for building the vocabulary.
    pub fn training_texts(&self) -> impl Iterator<Item = &str> {
        let t = &self.train;
        t.dii.iter().map(|d| d.caption.as_str()).chain(
            t.sis
                .iter()
                .flat_map(|s| s.sentences.iter().chain([&s.album_title, &s.album_description]).map(String::as_str)),
        )
    }

    pub fn build_vocab(&self) -> Vocab {
        Vocab::build(self.training_texts())
    }

    /// Tokenizes all splits with `vocab`; unknown words become UNK.
    pub fn tokenize(&self, vocab: &Vocab) -> Result<DatasetSplits> {
        self.validate()?;
        let tok = |r: &RawSplit| -> Result<Split> {
            let dii = r
                .dii
                .iter()
                .map(|d| DiiSample {
                    image_id: d.image_id.clone(),
                    caption: vocab.encode(&d.caption),
                })
                .collect();
            let sis = r
                .sis
                .iter()
                .map(|s| SisSample {
                    album_id: s.album_id.clone(),
                    album_title: vocab.encode(&s.album_title),
                    album_description: vocab.encode(&s.album_description),
                    image_ids: s.image_ids.clone(),
                    sentences: s.sentences.iter().map(|t| vocab.encode(t)).collect(),
                })
                .collect();
            Ok(Split { dii, sis })
        };
        Ok(DatasetSplits {
            vocab: vocab.clone(),
            train: tok(&self.train)?,
            val: tok(&self.val)?,
            test: tok(&self.test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiiSample {
    pub image_id: String,
    pub caption: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SisSample {
    pub album_id: String,
    pub album_title: TokenSequence,
    pub album_description: TokenSequence,
    pub image_ids: Vec<String>,
    pub sentences: Vec<TokenSequence>,
}

impl SisSample {
    /// Title followed by description: the context of the first sentence.
    pub fn album_context(&self) -> Vec<u32> {
        let mut v = self.album_title.0.clone();
        v.extend_from_slice(self.album_description.ids());
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub dii: Vec<DiiSample>,
    pub sis: Vec<SisSample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub vocab: Vocab,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl DatasetSplits {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

const THEMES: [&str; 16] = [
    "beach", "park", "wedding", "birthday", "concert", "museum", "garden", "festival", "lake", "mountain", "city", "zoo", "farm",
    "market", "stadium", "river",
];
const ADJECTIVES: [&str; 12] = [
    "red", "small", "happy", "old", "bright", "quiet", "big", "green", "tall", "sunny", "funny", "lovely",
];
const NOUNS: [&str; 16] = [
    "dog", "boat", "cake", "tree", "house", "car", "bird", "flower", "bridge", "band", "crowd", "kid", "horse", "table", "sign",
    "tower",
];
const SENTENCES: [[&str; 2]; STORY_LEN] = [
    ["we went to the {t} and saw a {a} {n} .", "our day at the {t} began with a {a} {n} ."],
    ["there was a {a} {n} near us .", "next we found a {a} {n} ."],
    ["the {n} looked very {a} .", "i took a picture of the {a} {n} ."],
    ["everyone loved the {a} {n} at the {t} .", "my friends played by the {a} {n} ."],
    ["at the end we said goodbye to the {a} {n} .", "it was a great day with the {a} {n} ."],
];
const DESCRIPTIONS: [&str; 3] = [
    "photos from our trip to the {t} .",
    "a day with friends at the {t} .",
    "memories of the {t} with family .",
];

fn fill(template: &str, theme: &str, adj: &str, noun: &str) -> String {
    template.replace("{t}", theme).replace("{a}", adj).replace("{n}", noun)
}

/// Deterministic grammar-generated albums. Every image shows a scene
/// (theme, adjective, noun) mentioned by both its caption and its story
/// sentence. Albums are split 80/10/10 (at least one album each in val
/// and test).
pub fn synthesize_toy_dataset(seed: u64, n_albums: usize) -> Result<RawSplits> {
    if n_albums < 4 {
        return Err(Error::Config(format!("a toy dataset needs at least 4 albums, got {n_albums}")));
    }
    let mut r = rng::labeled(seed, b"toy-dataset");
    let mut albums = Vec::with_capacity(n_albums);
    for a in 0..n_albums {
        let theme = *THEMES.choose(&mut r).unwrap();
        let album_id = format!("album{a:03}");
        let mut dii = Vec::with_capacity(STORY_LEN);
        let mut sis = SisRecord {
            album_id: album_id.clone(),
            album_title: String::new(),
            album_description: fill(DESCRIPTIONS.choose(&mut r).unwrap(), theme, "", ""),
            image_ids: Vec::with_capacity(STORY_LEN),
            sentences: Vec::with_capacity(STORY_LEN),
        };
        for (i, variants) in SENTENCES.iter().enumerate() {
            let adj = *ADJECTIVES.choose(&mut r).unwrap();
            let noun = *NOUNS.choose(&mut r).unwrap();
            let image_id = format!("{album_id}_{i}");
            let variant = variants[r.random_range(0..variants.len())];
            if i == 0 {
                sis.album_title = format!("the {adj} {theme} day");
            }
            sis.sentences.push(fill(variant, theme, adj, noun));
            sis.image_ids.push(image_id.clone());
            dii.push(DiiRecord {
                image_id,
                caption: fill("a {a} {n} at the {t} .", theme, adj, noun),
            });
        }
        albums.push((dii, sis));
    }
    let n_eval = (n_albums / 10).max(1);
    let n_train = n_albums - 2 * n_eval;
    let mut out = RawSplits::default();
    for (a, (dii, sis)) in albums.into_iter().enumerate() {
        let split = if a < n_train {
            SplitName::Train
        } else if a < n_train + n_eval {
            SplitName::Val
        } else {
            SplitName::Test
        };
        let s = out.split_mut(split);
        s.dii.extend(dii);
        s.sis.push(sis);
    }
    Ok(out)
}

/// Features for every captioned image, aligned with the encoder's text
/// space: `normalize(encode_text(caption) + noise * id_feature)`.
pub fn aligned_feature_table(raw: &RawSplits, vocab: &Vocab, encoder: &EncoderStub, noise: f32, seed: u64) -> Result<FeatureTable> {
    let d = encoder.d_feat();
    let mut table = FeatureTable::new(d, Provenance::Synthetic);
    for name in SplitName::ALL {
        for rec in &raw.split(name).dii {
            let text = encoder.encode_text(vocab.encode(&rec.caption).ids());
            let id = synthetic_image_feature(&rec.image_id, seed, d);
            let mixed = text.values().iter().zip(id.values()).map(|(t, i)| t + noise * i).collect();
            table.insert(rec.image_id.clone(), FeatureVector::normalized(mixed)?)?;
        }
    }
    Ok(table)
}
