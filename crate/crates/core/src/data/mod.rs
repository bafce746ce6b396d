//! Dataset layout, hygiene rules, planted synthetic task, and HLAT map generation.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.json      DatasetManifest
//! questions.jsonl    one QuestionRecord per sample, manifest order
//! vocab.txt          one token per line, line number = id
//! features/<id>.feat feature grids
//! maps/<id>.map      reference maps (and <id>.a<k>.map annotator maps)
//! hlat/<id>.map      maps generated by a trained attention network
//! ```

pub mod formats;
mod hlat;
mod hygiene;
mod synth;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureGrid, Prototypes};
use crate::error::{ensure, Error, Result};

pub use hlat::{generate_hlat, HlatProvenance};
pub use hygiene::{clean, normalize_refs, prepare, CleanReport};
pub use synth::{bayes_reader, gen_synthetic, generate, planted_map, SynthSpec};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub features: FeatureGrid,
    pub tokens: Vec<usize>,
    pub answer: Option<usize>,
    pub votes: Vec<String>,
    pub answer_type: Option<String>,
    /// Reference (human or planted) attention map.
    pub reference: Option<Vec<f64>>,
    /// Independent annotator maps used for evaluation.
    pub annotators: Vec<Vec<f64>>,
    /// Map produced by a trained attention network.
    pub hlat: Option<Vec<f64>>,
}

impl Sample {
    /// Maps to score a prediction against: annotators if present, else the reference.
    pub fn evaluation_maps(&self) -> Result<Vec<Vec<f64>>> {
        if !self.annotators.is_empty() {
            return Ok(self.annotators.clone());
        }
        self.reference
            .clone()
            .map(|r| vec![r])
            .ok_or_else(|| Error::contract(format!("sample {} has no reference maps", self.id)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub side: usize,
    pub vocab: usize,
    pub answers: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<Prototypes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hlat: Option<HlatProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotators: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hlat: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dims: Dims,
    pub counts: SplitCounts,
    /// Set once reference maps have been passed through softmax.
    pub refs_normalized: bool,
    pub softmax_temperature: f64,
    pub answers: Vec<String>,
    pub provenance: Provenance,
    pub samples: Vec<SampleRecord>,
}

/// One line of `questions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub votes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vec<String>,
    pub samples: Vec<Sample>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    pub fn answer_name(&self, k: usize) -> &str {
        self.manifest.answers.get(k).map_or("<unknown>", String::as_str)
    }

    /// Recompute counts and sample records from `samples`.
    pub fn sync_manifest(&mut self) {
        let mut counts = SplitCounts::default();
        self.manifest.samples = self
            .samples
            .iter()
            .map(|s| {
                match s.split {
                    Split::Train => counts.train += 1,
                    Split::Val => counts.val += 1,
                }
                SampleRecord {
                    id: s.id.clone(),
                    split: s.split,
                    features: format!("features/{}.feat", s.id),
                    reference: s.reference.as_ref().map(|_| format!("maps/{}.map", s.id)),
                    annotators: (0..s.annotators.len())
                        .map(|k| format!("maps/{}.a{k}.map", s.id))
                        .collect(),
                    hlat: s.hlat.as_ref().map(|_| format!("hlat/{}.map", s.id)),
                }
            })
            .collect();
        self.manifest.counts = counts;
    }

    /// Check every sample against the manifest dims.
    pub fn validate(&self) -> Result<()> {
        let d = self.manifest.dims;
        let cells = d.side * d.side;
        ensure!(
            self.manifest.counts.train + self.manifest.counts.val == self.samples.len(),
            "manifest counts {:?} disagree with {} samples",
            self.manifest.counts,
            self.samples.len()
        );
        for s in &self.samples {
            ensure!(
                s.features.channels() == d.channels && s.features.side() == d.side,
                "sample {} grid is {}x{}², manifest says {}x{}²",
                s.id,
                s.features.channels(),
                s.features.side(),
                d.channels,
                d.side
            );
            ensure!(!s.tokens.is_empty(), "sample {} has an empty question", s.id);
            ensure!(
                s.tokens.iter().all(|&t| t < d.vocab),
                "sample {} has a token outside the vocabulary of {}",
                s.id,
                d.vocab
            );
            if let Some(a) = s.answer {
                ensure!(a < d.answers, "sample {} answer {a} ≥ {}", s.id, d.answers);
            }
            for m in s.reference.iter().chain(&s.annotators).chain(&s.hlat) {
                ensure!(
                    m.len() == cells,
                    "sample {} has a map of {} cells, grid has {cells}",
                    s.id,
                    m.len()
                );
            }
        }
        Ok(())
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.sync_manifest();
        self.validate()?;
        let side = self.manifest.dims.side;
        io(dir, std::fs::create_dir_all(dir.join("features")))?;
        io(dir, std::fs::create_dir_all(dir.join("maps")))?;
        for (s, rec) in self.samples.iter().zip(&self.manifest.samples) {
            formats::write_feature_grid(&dir.join(&rec.features), &s.features)?;
            if let (Some(m), Some(p)) = (&s.reference, &rec.reference) {
                formats::write_attention_map(&dir.join(p), side, m)?;
            }
            for (m, p) in s.annotators.iter().zip(&rec.annotators) {
                formats::write_attention_map(&dir.join(p), side, m)?;
            }
            if let (Some(m), Some(p)) = (&s.hlat, &rec.hlat) {
                formats::write_attention_map(&dir.join(p), side, m)?;
            }
        }
        let qpath = dir.join("questions.jsonl");
        let mut out = Vec::new();
        for s in &self.samples {
            let rec = QuestionRecord {
                id: s.id.clone(),
                tokens: s.tokens.clone(),
                answer: s.answer,
                votes: s.votes.clone(),
                answer_type: s.answer_type.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        io(&qpath, std::fs::write(&qpath, out))?;
        let vpath = dir.join("vocab.txt");
        let mut vocab = self.vocab.join("\n");
        vocab.push('\n');
        io(&vpath, std::fs::write(&vpath, vocab))?;
        self.save_manifest(dir)
    }

    pub fn save_manifest(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut f = io(&path, std::fs::File::create(&path))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        io(&path, f.write_all(b"\n"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let bytes = io(&mpath, std::fs::read(&mpath))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&mpath, 0, format!("invalid manifest: {e}")))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(&mpath, 0, format!("unsupported manifest version {}", manifest.format_version)));
        }
        let qpath = dir.join("questions.jsonl");
        let file = io(&qpath, std::fs::File::open(&qpath))?;
        let mut questions = std::collections::HashMap::new();
        let mut offset = 0u64;
        for line in std::io::BufReader::new(file).lines() {
            let line = io(&qpath, line)?;
            let len = line.len() as u64 + 1;
            if !line.trim().is_empty() {
                let rec: QuestionRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::format(&qpath, offset, format!("bad question record: {e}")))?;
                questions.insert(rec.id.clone(), rec);
            }
            offset += len;
        }
        let vpath = dir.join("vocab.txt");
        let vocab = match std::fs::read_to_string(&vpath) {
            Ok(s) => s.lines().map(str::to_string).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(vpath, e)),
        };
        let side = manifest.dims.side;
        let read_map = |rel: &str| -> Result<Vec<f64>> {
            let p = dir.join(rel);
            let (l, m) = formats::read_attention_map(&p)?;
            if l != side {
                return Err(Error::format(p, 12, format!("map side {l}, manifest says {side}")));
            }
            Ok(m)
        };
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            let fpath = dir.join(&rec.features);
            let features = formats::read_feature_grid(&fpath)?;
            if features.channels() != manifest.dims.channels || features.side() != side {
                return Err(Error::format(
                    fpath,
                    12,
                    format!(
                        "grid is {}x{}², manifest says {}x{}²",
                        features.channels(),
                        features.side(),
                        manifest.dims.channels,
                        side
                    ),
                ));
            }
            let q = questions
                .remove(&rec.id)
                .ok_or_else(|| Error::format(&qpath, 0, format!("no question record for {}", rec.id)))?;
            samples.push(Sample {
                id: rec.id.clone(),
                split: rec.split,
                features,
                tokens: q.tokens,
                answer: q.answer,
                votes: q.votes,
                answer_type: q.answer_type,
                reference: rec.reference.as_deref().map(read_map).transpose()?,
                annotators: rec.annotators.iter().map(|p| read_map(p)).collect::<Result<_>>()?,
                hlat: rec.hlat.as_deref().map(read_map).transpose()?,
            });
        }
        let ds = Dataset {
            manifest,
            vocab,
            samples,
        };
        ds.validate().map_err(|e| Error::format(mpath, 0, e.to_string()))?;
        Ok(ds)
    }
}

/// Read a vocabulary file: one token per line, line number is the id.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let s = io(path, std::fs::read_to_string(path))?;
    Ok(s.lines().map(str::to_string).collect())
}

/// The `k` most frequent answers, ties broken alphabetically.
pub fn top_answers<'a>(answers: impl IntoIterator<Item = &'a str>, k: usize) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
    for a in answers {
        *counts.entry(crate::metrics::normalize_answer(a)).or_default() += 1;
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(a, _)| a).collect()
}

#[cfg(test)]
mod tests;
