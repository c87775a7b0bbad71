use std::collections::HashSet;
use std::path::Path;

use super::text::is_punct_token;
use crate::error::Result;

const DEFAULT_LIST: &str = include_str!("../../data/stopwords.txt");

/// Case-insensitive stopword set. Punctuation-only tokens count as
/// stopwords as well, since they carry no lexical knowledge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: HashSet<String>,
}

impl Default for StopwordList {
    fn default() -> Self {
        Self::from_text(DEFAULT_LIST)
    }
}

impl StopwordList {
    /// One word per line; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> StopwordList {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        StopwordList { words }
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> StopwordList {
        StopwordList {
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<StopwordList> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, token: &str) -> bool {
        is_punct_token(token) || self.words.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}
