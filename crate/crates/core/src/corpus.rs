//! Dialogue/summary corpus: CSV ingestion, small-section filtering and
//! reproducible per-section train/evaluation splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const DEFAULT_MIN_SECTION_SIZE: usize = 10;
pub const DEFAULT_TRAIN_SAMPLE_SIZE: usize = 5;

const REQUIRED_COLUMNS: [&str; 4] = ["ID", "section_header", "section_text", "dialogue"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {reason}")]
    Ingestion { path: String, reason: String },
    #[error("CSV header is missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("unknown section {0}")]
    UnknownSection(SectionId),
    #[error("section {section} has {available} records; a training sample of {requested} needs more")]
    SectionTooSmall {
        section: SectionId,
        available: usize,
        requested: usize,
    },
    #[error("record {0} is not part of this dataset")]
    UnknownRecord(String),
}

/// Canonical section name: trimmed, inner whitespace collapsed, uppercase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SectionId(String);

impl SectionId {
    /// Canonicalizes a raw header. Returns `None` if nothing is left.
    pub fn parse(raw: &str) -> Option<Self> {
        let name = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_uppercase();
        if name.is_empty() {
            None
        } else {
            Some(Self(name))
        }
    }

    /// Inverse of [`SectionId::slug`].
    pub fn from_slug(slug: &str) -> Option<Self> {
        let mut bytes = Vec::with_capacity(slug.len());
        let mut it = slug.bytes();
        while let Some(b) = it.next() {
            match b {
                b'_' => bytes.push(b' '),
                b'%' => {
                    let hi = (it.next()? as char).to_digit(16)?;
                    let lo = (it.next()? as char).to_digit(16)?;
                    bytes.push((hi * 16 + lo) as u8);
                }
                _ => bytes.push(b),
            }
        }
        Self::parse(&String::from_utf8(bytes).ok()?)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// File-name form: spaces become `_`; bytes other than ASCII
    /// alphanumerics, `-` and `.` are percent-escaped (`FAM/SOCHX` →
    /// `FAM%2FSOCHX`). Injective, so distinct sections never share a file.
    pub fn slug(&self) -> String {
        let mut out = String::with_capacity(self.0.len());
        for b in self.0.bytes() {
            match b {
                b' ' => out.push('_'),
                b if b.is_ascii_alphanumeric() || b == b'-' || b == b'.' => out.push(b as char),
                b => out.push_str(&format!("%{b:02X}")),
            }
        }
        out
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub section: SectionId,
    pub dialogue: String,
    pub reference_summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the source file bytes, hex.
    pub source_digest: String,
    pub min_section_size: usize,
    /// Sections removed by the size filter, with their record counts.
    pub dropped_sections: BTreeMap<SectionId, usize>,
}

/// All retained records, grouped by section, in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionDataset {
    pub sections: BTreeMap<SectionId, Vec<DialogueRecord>>,
    pub provenance: Provenance,
}

impl SectionDataset {
    pub fn total_records(&self) -> usize {
        self.sections.values().map(Vec::len).sum()
    }

    pub fn records(&self, section: &SectionId) -> Option<&[DialogueRecord]> {
        self.sections.get(section).map(Vec::as_slice)
    }

    pub fn find(&self, id: &str) -> Option<&DialogueRecord> {
        self.sections.values().flatten().find(|r| r.id == id)
    }

    /// Drops sections below `min_section_size`. Applying the load threshold
    /// again is a no-op.
    pub fn refilter(&self, min_section_size: usize) -> SectionDataset {
        let mut out = self.clone();
        let small: Vec<SectionId> = out
            .sections
            .iter()
            .filter(|(_, recs)| recs.len() < min_section_size)
            .map(|(s, _)| s.clone())
            .collect();
        for s in small {
            let recs = out.sections.remove(&s).unwrap_or_default();
            out.provenance.dropped_sections.insert(s, recs.len());
        }
        out.provenance.min_section_size = out.provenance.min_section_size.max(min_section_size);
        out
    }

    /// Builds a dataset from in-memory records (same filtering as
    /// [`load_dataset`]). `source_digest` is computed over the ids.
    pub fn from_records(
        records: Vec<DialogueRecord>,
        min_section_size: usize,
    ) -> Result<Self, CorpusError> {
        let mut hasher = Sha256::new();
        for r in &records {
            hasher.update(r.id.as_bytes());
            hasher.update([0]);
        }
        build_dataset(records, hex::encode(hasher.finalize()), min_section_size)
    }
}

/// Reads the corpus CSV (`ID,section_header,section_text,dialogue`), pools
/// every row, canonicalizes section headers and drops sections with fewer
/// than `min_section_size` records.
pub fn load_dataset(path: &Path, min_section_size: usize) -> Result<SectionDataset, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::Ingestion {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_dataset(&bytes, min_section_size).map_err(|e| match e {
        CorpusError::Ingestion { reason, .. } => CorpusError::Ingestion {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

/// [`load_dataset`] over bytes already in memory.
pub fn parse_dataset(bytes: &[u8], min_section_size: usize) -> Result<SectionDataset, CorpusError> {
    let ingestion = |reason: String| CorpusError::Ingestion {
        path: "<memory>".into(),
        reason,
    };
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(ingestion("file is empty".into()));
    }
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(bytes);
    let headers = reader.headers().map_err(|e| ingestion(e.to_string()))?.clone();
    let mut col = [0usize; 4];
    for (slot, name) in col.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))?;
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CorpusError::BadRow {
            row: line,
            reason: e.to_string(),
        })?;
        let field = |k: usize| row.get(col[k]).unwrap_or("");
        let id = field(0).trim().to_string();
        if id.is_empty() {
            return Err(CorpusError::BadRow {
                row: line,
                reason: "empty ID".into(),
            });
        }
        let section = SectionId::parse(field(1)).ok_or_else(|| CorpusError::BadRow {
            row: line,
            reason: "empty section_header".into(),
        })?;
        let dialogue = field(3).to_string();
        if dialogue.trim().is_empty() {
            return Err(CorpusError::BadRow {
                row: line,
                reason: format!("record {id} has an empty dialogue"),
            });
        }
        records.push(DialogueRecord {
            id,
            section,
            dialogue,
            reference_summary: field(2).to_string(),
        });
    }
    if records.is_empty() {
        return Err(ingestion("no data rows".into()));
    }
    let digest = hex::encode(Sha256::digest(bytes));
    build_dataset(records, digest, min_section_size)
}

fn build_dataset(
    records: Vec<DialogueRecord>,
    source_digest: String,
    min_section_size: usize,
) -> Result<SectionDataset, CorpusError> {
    let mut seen = HashSet::new();
    let mut sections: BTreeMap<SectionId, Vec<DialogueRecord>> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.id.clone()) {
            return Err(CorpusError::DuplicateId(r.id));
        }
        sections.entry(r.section.clone()).or_default().push(r);
    }
    let dataset = SectionDataset {
        sections,
        provenance: Provenance {
            source_digest,
            min_section_size: 0,
            dropped_sections: BTreeMap::new(),
        },
    };
    Ok(dataset.refilter(min_section_size))
}

/// Section name and record count, sorted by name.
pub fn section_inventory(dataset: &SectionDataset) -> Vec<(SectionId, usize)> {
    dataset
        .sections
        .iter()
        .map(|(s, recs)| (s.clone(), recs.len()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub train_sample_size: usize,
    pub seed: u64,
    /// When false, the evaluation list is the whole section (training
    /// records included).
    pub eval_excludes_training: bool,
}

impl SplitOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            train_sample_size: DEFAULT_TRAIN_SAMPLE_SIZE,
            seed,
            eval_excludes_training: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSplit {
    pub section: SectionId,
    /// Sampled training batch, in draw order.
    pub training: Vec<DialogueRecord>,
    /// Remaining records, in source order.
    pub evaluation: Vec<DialogueRecord>,
    pub seed: u64,
}

/// Section-local seed: the run seed mixed with the section name, so each
/// section draws an independent sample.
pub fn section_seed(seed: u64, section: &SectionId) -> u64 {
    let digest = Sha256::digest(section.as_str().as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(word)
}

/// Samples `train_sample_size` records without replacement.
///
/// Recipe: shuffle the indices `0..n` of the section's records (source
/// order) with [`SplitMix64`] seeded by `opts.seed` and take the first
/// `train_sample_size` positions.
pub fn split_section(
    dataset: &SectionDataset,
    section: &SectionId,
    opts: &SplitOptions,
) -> Result<SectionSplit, CorpusError> {
    let records = dataset
        .records(section)
        .ok_or_else(|| CorpusError::UnknownSection(section.clone()))?;
    if records.len() <= opts.train_sample_size {
        return Err(CorpusError::SectionTooSmall {
            section: section.clone(),
            available: records.len(),
            requested: opts.train_sample_size,
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    SplitMix64::new(opts.seed).shuffle(&mut order);
    let picked = &order[..opts.train_sample_size];
    let training = picked.iter().map(|&i| records[i].clone()).collect();
    let evaluation = records
        .iter()
        .enumerate()
        .filter(|(i, _)| !opts.eval_excludes_training || !picked.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok(SectionSplit {
        section: section.clone(),
        training,
        evaluation,
        seed: opts.seed,
    })
}

/// Persisted form of a split: `splits/<section>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub section: SectionId,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl From<&SectionSplit> for SplitManifest {
    fn from(s: &SectionSplit) -> Self {
        Self {
            section: s.section.clone(),
            seed: s.seed,
            train_ids: s.training.iter().map(|r| r.id.clone()).collect(),
            eval_ids: s.evaluation.iter().map(|r| r.id.clone()).collect(),
        }
    }
}

impl SplitManifest {
    /// Rebuilds the split against the dataset it was drawn from.
    pub fn resolve(&self, dataset: &SectionDataset) -> Result<SectionSplit, CorpusError> {
        let records = dataset
            .records(&self.section)
            .ok_or_else(|| CorpusError::UnknownSection(self.section.clone()))?;
        let lookup = |ids: &[String]| -> Result<Vec<DialogueRecord>, CorpusError> {
            ids.iter()
                .map(|id| {
                    records
                        .iter()
                        .find(|r| &r.id == id)
                        .cloned()
                        .ok_or_else(|| CorpusError::UnknownRecord(id.clone()))
                })
                .collect()
        };
        Ok(SectionSplit {
            section: self.section.clone(),
            training: lookup(&self.train_ids)?,
            evaluation: lookup(&self.eval_ids)?,
            seed: self.seed,
        })
    }
}
