//! JSON Lines datasets, feature files, training logs, generation output and
//! evaluation reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vistory_core::data::{DiiRecord, RawSplits, SisRecord, SplitName};
use vistory_core::decoding::{DecodeConfig, GeneratedStory, SentenceTrace, StopReason, Strategy};
use vistory_core::encoder::FeatureTable;
use vistory_core::metrics::MetricReport;
use vistory_core::mapping::ContextMode;
use vistory_core::tokenizer::Vocab;
use vistory_core::training::{EpochRecord, StepRecord};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.into(), source }
}

/// Parses every non-blank line of a JSON Lines file; errors carry the
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| FormatError::Record {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Streams records to a JSON Lines file.
pub struct JsonlWriter {
    path: PathBuf,
    w: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, FormatError> {
        Ok(Self {
            path: path.into(),
            w: BufWriter::new(File::create(path).map_err(io_err(path))?),
        })
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<(), FormatError> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.w, "{line}").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), FormatError> {
        self.w.flush().map_err(io_err(&self.path))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FormatError> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct DiiLine {
    image_id: String,
    caption: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct SisLine {
    album_id: String,
    album_title: String,
    album_description: String,
    image_ids: Vec<String>,
    sentences: Vec<String>,
}

pub fn dataset_file(dir: &Path, split: SplitName, kind: &str) -> PathBuf {
    dir.join(format!("{}.{kind}.jsonl", split.as_str()))
}

pub fn save_dataset(dir: &Path, raw: &RawSplits) -> Result<(), FormatError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for name in SplitName::ALL {
        let s = raw.split(name);
        let dii: Vec<DiiLine> = s.dii.iter().map(|r| DiiLine { image_id: r.image_id.clone(), caption: r.caption.clone() }).collect();
        let sis: Vec<SisLine> = s
            .sis
            .iter()
            .map(|r| SisLine {
                album_id: r.album_id.clone(),
                album_title: r.album_title.clone(),
                album_description: r.album_description.clone(),
                image_ids: r.image_ids.clone(),
                sentences: r.sentences.clone(),
            })
            .collect();
        write_jsonl(&dataset_file(dir, name, "dii"), &dii)?;
        write_jsonl(&dataset_file(dir, name, "sis"), &sis)?;
    }
    Ok(())
}

/// Reads all six split files and validates every record and the splits.
pub fn load_dataset(dir: &Path) -> Result<RawSplits, FormatError> {
    let mut raw = RawSplits::default();
    for name in SplitName::ALL {
        let dii_path = dataset_file(dir, name, "dii");
        let sis_path = dataset_file(dir, name, "sis");
        let dii: Vec<DiiLine> = read_jsonl(&dii_path)?;
        let sis: Vec<SisLine> = read_jsonl(&sis_path)?;
        let split = raw.split_mut(name);
        split.dii = dii.into_iter().map(|l| DiiRecord { image_id: l.image_id, caption: l.caption }).collect();
        for (i, l) in sis.into_iter().enumerate() {
            let rec = SisRecord {
                album_id: l.album_id,
                album_title: l.album_title,
                album_description: l.album_description,
                image_ids: l.image_ids,
                sentences: l.sentences,
            };
            rec.validate().map_err(|e| FormatError::Record {
                path: sis_path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            split.sis.push(rec);
        }
    }
    raw.validate().map_err(|e| FormatError::Record { path: dir.into(), line: 0, msg: e.to_string() })?;
    for name in SplitName::ALL {
        let s = raw.split(name);
        log::info!("{}: {} DII captions, {} SIS stories", name.as_str(), s.dii.len(), s.sis.len());
    }
    Ok(raw)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureLine {
    id: String,
    values: Vec<f32>,
}

pub fn save_features(path: &Path, table: &FeatureTable) -> Result<(), FormatError> {
    let mut w = JsonlWriter::create(path)?;
    for (id, fv) in table.iter() {
        w.write(&FeatureLine { id: id.into(), values: fv.values().to_vec() })?;
    }
    w.finish()
}

pub fn load_features(path: &Path, dim: usize) -> Result<FeatureTable, FormatError> {
    let lines: Vec<FeatureLine> = read_jsonl(path)?;
    let table = FeatureTable::from_records(lines.into_iter().map(|l| (l.id, l.values)), dim)
        .map_err(|e| FormatError::Record { path: path.into(), line: 0, msg: e.to_string() })?;
    Ok(table)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLine {
    pub epoch: usize,
    pub phase: String,
    pub nll: f64,
    pub contras: Option<f64>,
    pub combined: f64,
    pub val_loss: Option<f64>,
}

impl From<&EpochRecord> for EpochLine {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            phase: r.phase.as_str().into(),
            nll: r.nll,
            contras: r.contras,
            combined: r.combined,
            val_loss: r.val_loss,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepLine {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub nll: f64,
    pub contras: Option<f64>,
    pub combined: f64,
    pub lr: f64,
    pub applied: bool,
}

impl From<&StepRecord> for StepLine {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            epoch: r.epoch,
            phase: r.phase.as_str().into(),
            nll: r.nll,
            contras: r.contras,
            combined: r.combined,
            lr: r.lr,
            applied: r.applied,
        }
    }
}

/// Decoding settings echoed into every generation record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecodeEcho {
    pub strategy: String,
    pub max_len: usize,
    pub num_beams: usize,
    pub k: usize,
    pub p: f64,
    pub simctg_k: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub length_normalize: bool,
    pub context_mode: String,
    pub context_sentences: usize,
}

impl DecodeEcho {
    pub fn new(cfg: &DecodeConfig, mode: ContextMode, l: usize) -> Self {
        Self {
            strategy: cfg.strategy.as_str().into(),
            max_len: cfg.max_len,
            num_beams: cfg.num_beams,
            k: cfg.k,
            p: cfg.p,
            simctg_k: cfg.simctg_k,
            alpha: cfg.alpha,
            temperature: cfg.temperature,
            seed: cfg.seed,
            length_normalize: cfg.length_normalize,
            context_mode: mode.as_str().into(),
            context_sentences: l,
        }
    }
}

/// One generated story.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenerationLine {
    pub sequence_id: String,
    pub strategy: String,
    pub image_ids: Vec<String>,
    pub sentences: Vec<String>,
    pub stop_reasons: Vec<String>,
    /// Text each sentence was conditioned on.
    pub contexts: Vec<String>,
    pub truncated: Vec<usize>,
    pub config: DecodeEcho,
}

impl GenerationLine {
    pub fn new(story: &GeneratedStory, vocab: &Vocab, echo: &DecodeEcho) -> Self {
        Self {
            sequence_id: story.sequence_id.clone(),
            strategy: echo.strategy.clone(),
            image_ids: story.trace.iter().map(|t| t.image_id.clone()).collect(),
            sentences: story.sentences.iter().map(|s| vocab.decode(s.ids())).collect(),
            stop_reasons: story.trace.iter().map(|t| t.stop.as_str().into()).collect(),
            contexts: story.trace.iter().map(|t| vocab.decode(&t.context_tokens)).collect(),
            truncated: story.trace.iter().map(|t| t.truncated).collect(),
            config: echo.clone(),
        }
    }

    /// Re-tokenizes the stored text for evaluation.
    pub fn to_story(&self, vocab: &Vocab) -> Result<GeneratedStory, String> {
        if self.sentences.len() != self.image_ids.len() {
            return Err(format!(
                "sequence {}: {} sentences for {} images",
                self.sequence_id,
                self.sentences.len(),
                self.image_ids.len()
            ));
        }
        let strategy = Strategy::parse(&self.strategy).ok_or_else(|| format!("unknown strategy `{}`", self.strategy))?;
        let stop = |i: usize| match self.stop_reasons.get(i).map(String::as_str) {
            Some("length") => StopReason::Length,
            _ => StopReason::Eos,
        };
        Ok(GeneratedStory {
            sequence_id: self.sequence_id.clone(),
            sentences: self.sentences.iter().map(|s| vocab.encode(s)).collect(),
            trace: self
                .image_ids
                .iter()
                .enumerate()
                .map(|(i, id)| SentenceTrace {
                    image_id: id.clone(),
                    strategy,
                    stop: stop(i),
                    context_tokens: self.contexts.get(i).map(|c| vocab.encode(c).0).unwrap_or_default(),
                    truncated: self.truncated.get(i).copied().unwrap_or(0),
                })
                .collect(),
        })
    }
}

#[derive(Serialize)]
struct StoryJson<'a> {
    sequence_id: &'a str,
    rep_1: f64,
    rep_2: f64,
    rep_3: f64,
    rep_4: f64,
    diversity: Option<f64>,
    grounding: Option<f64>,
    perplexity: Option<f64>,
    tokens: usize,
    ngrams: [usize; 4],
    skipped_pairs: usize,
}

#[derive(Serialize)]
struct AggregateJson {
    scale: &'static str,
    rep_1: f64,
    rep_2: f64,
    rep_3: f64,
    rep_4: f64,
    diversity: Option<f64>,
    grounding: Option<f64>,
    perplexity: Option<f64>,
    stories: usize,
    stories_without_diversity: usize,
    skipped_pairs: usize,
    pooled: bool,
    bridge_sentences: bool,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    stories: Vec<StoryJson<'a>>,
    aggregate: AggregateJson,
}

/// Report document: per-story fractions and a percent-scale aggregate.
pub fn report_json(r: &MetricReport) -> String {
    let a = &r.aggregate;
    let doc = ReportJson {
        stories: r
            .stories
            .iter()
            .map(|s| StoryJson {
                sequence_id: &s.sequence_id,
                rep_1: s.rep[0],
                rep_2: s.rep[1],
                rep_3: s.rep[2],
                rep_4: s.rep[3],
                diversity: s.diversity,
                grounding: s.grounding,
                perplexity: s.perplexity,
                tokens: s.tokens,
                ngrams: s.ngrams,
                skipped_pairs: s.skipped_pairs,
            })
            .collect(),
        aggregate: AggregateJson {
            scale: "percent",
            rep_1: a.rep[0],
            rep_2: a.rep[1],
            rep_3: a.rep[2],
            rep_4: a.rep[3],
            diversity: a.diversity,
            grounding: a.grounding,
            perplexity: a.perplexity,
            stories: a.stories,
            stories_without_diversity: a.stories_without_diversity,
            skipped_pairs: a.skipped_pairs,
            pooled: a.pooled,
            bridge_sentences: a.bridge_sentences,
        },
    };
    serde_json::to_string_pretty(&doc).expect("report serializes")
}

/// Aligned text table of the aggregate, two decimals.
pub fn report_table(label: &str, r: &MetricReport) -> String {
    let a = &r.aggregate;
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let header = format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "", "rep-1", "rep-2", "rep-3", "rep-4", "diversity", "grounding", "ppl"
    );
    let row = format!(
        "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>10} {:>10} {:>10}",
        label,
        a.rep[0],
        a.rep[1],
        a.rep[2],
        a.rep[3],
        opt(a.diversity),
        opt(a.grounding),
        opt(a.perplexity)
    );
    format!("{header}\n{row}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use vistory_core::data::synthesize_toy_dataset;
    use vistory_core::encoder::Provenance;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = synthesize_toy_dataset(3, 12).unwrap();
        save_dataset(dir.path(), &raw).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), raw);
    }

    #[test]
    fn malformed_and_short_records_cite_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let raw = synthesize_toy_dataset(3, 12).unwrap();
        save_dataset(dir.path(), &raw).unwrap();
        let path = dataset_file(dir.path(), SplitName::Val, "sis");
        let mut rec = raw.val.sis[0].clone();
        rec.image_ids.pop();
        let line = serde_json::json!({
            "album_id": rec.album_id, "album_title": rec.album_title, "album_description": rec.album_description,
            "image_ids": rec.image_ids, "sentences": rec.sentences,
        });
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains(&rec.album_id) && err.contains("found 4"), "{err}");
        std::fs::write(&path, "\n{not json\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = FeatureTable::new(3, Provenance::Synthetic);
        t.insert("a".into(), vistory_core::encoder::FeatureVector::normalized(vec![1.0, 2.0, 2.0]).unwrap()).unwrap();
        let p = dir.path().join("f.jsonl");
        save_features(&p, &t).unwrap();
        let back = load_features(&p, 3).unwrap();
        assert_eq!(back.get("a"), t.get("a"));
        assert!(load_features(&p, 4).is_err());
    }
}
