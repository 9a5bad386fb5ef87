use serde::{Deserialize, Serialize};

/// Normalized token sequence: lowercase, split on every non-alphanumeric
/// run, empty pieces dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub source: String,
}

impl TokenSeq {
    pub fn new(text: &str) -> Self {
        Self {
            tokens: normalize(text),
            source: text.to_string(),
        }
    }

    /// Wraps already-normalized tokens; `source` is their space-joined form.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let source = tokens.join(" ");
        Self { tokens, source }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_splits_on_punctuation() {
        assert_eq!(
            normalize("Chest-pain x2 DAYS.  No fever!"),
            vec!["chest", "pain", "x2", "days", "no", "fever"]
        );
        assert!(normalize(" ,.; ").is_empty());
    }
}
