use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokens::normalize, MetricsError, Prf, TokenSeq};

/// One lexicon concept with all its normalized surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept_id: String,
    pub surface_forms: Vec<Vec<String>>,
}

/// Dictionary of medical concepts used for concept F1.
#[derive(Debug, Clone)]
pub struct ConceptLexicon {
    entries: Vec<ConceptEntry>,
    index: HashMap<Vec<String>, Vec<usize>>,
    longest: usize,
}

impl ConceptLexicon {
    /// Builds a lexicon from `(concept_id, surface form)` pairs. Lines for
    /// the same id are merged; surface forms are normalized like metric
    /// tokens.
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut entries: Vec<ConceptEntry> = Vec::new();
        let mut by_id: HashMap<String, usize> = HashMap::new();
        for (id, surface) in pairs {
            let id = id.as_ref().trim();
            if id.is_empty() {
                return Err(MetricsError::Lexicon("empty concept id".into()));
            }
            let form = normalize(surface.as_ref());
            if form.is_empty() {
                return Err(MetricsError::Lexicon(format!(
                    "concept {id} has an empty surface form"
                )));
            }
            let idx = *by_id.entry(id.to_string()).or_insert_with(|| {
                entries.push(ConceptEntry {
                    concept_id: id.to_string(),
                    surface_forms: Vec::new(),
                });
                entries.len() - 1
            });
            if !entries[idx].surface_forms.contains(&form) {
                entries[idx].surface_forms.push(form);
            }
        }
        if entries.is_empty() {
            return Err(MetricsError::Lexicon("lexicon has no entries".into()));
        }
        let mut index: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
        let mut longest = 0;
        for (i, e) in entries.iter().enumerate() {
            for form in &e.surface_forms {
                longest = longest.max(form.len());
                let ids = index.entry(form.clone()).or_default();
                if !ids.contains(&i) {
                    ids.push(i);
                }
            }
        }
        Ok(Self {
            entries,
            index,
            longest,
        })
    }

    /// Parses the tab-separated lexicon format: `concept_id<TAB>surface form`
    /// per line. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, form) = line.split_once('\t').ok_or_else(|| {
                MetricsError::Lexicon(format!("line {}: expected `id<TAB>surface form`", lineno + 1))
            })?;
            pairs.push((id.to_string(), form.to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MetricsError::Lexicon(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    /// Greedy longest-match scan, left to right. A match consumes its
    /// tokens, so shorter forms inside it are never reported.
    pub fn extract(&self, text: &TokenSeq) -> BTreeSet<String> {
        let tokens = &text.tokens;
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let hit = (1..=max)
                .rev()
                .find_map(|len| self.index.get(&tokens[i..i + len]).map(|ids| (len, ids)));
            match hit {
                Some((len, ids)) => {
                    for &id in ids {
                        found.insert(self.entries[id].concept_id.clone());
                    }
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }
}

pub fn extract_concepts(text: &TokenSeq, lexicon: &ConceptLexicon) -> BTreeSet<String> {
    lexicon.extract(text)
}

/// Set-level precision/recall/F1 of extracted concepts. Two empty sets
/// agree perfectly and score 1.
pub fn concept_f1(candidate: &TokenSeq, reference: &TokenSeq, lexicon: &ConceptLexicon) -> Prf {
    let cand = lexicon.extract(candidate);
    let refs = lexicon.extract(reference);
    set_prf(&cand, &refs)
}

pub fn set_prf(cand: &BTreeSet<String>, refs: &BTreeSet<String>) -> Prf {
    if cand.is_empty() && refs.is_empty() {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hits = cand.intersection(refs).count();
    Prf::from_counts(hits, cand.len(), refs.len())
}
