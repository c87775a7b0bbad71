use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{extract_first_sentence, tokenize};
use crate::error::{Error, Result};

/// One encyclopedia entry reduced to its first sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeItem {
    pub id: usize,
    pub title: String,
    pub text: String,
}

/// Raw article record as found in an articles file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub title: String,
    pub text: String,
}

/// Candidate knowledge set. Ids are positions: item `i` has id `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    items: Vec<KnowledgeItem>,
    title_index: HashMap<String, usize>,
}

impl KnowledgeBase {
    /// Validates contiguous ids and non-empty texts, then indexes titles.
    pub fn from_items(items: Vec<KnowledgeItem>) -> Result<KnowledgeBase> {
        let mut title_index = HashMap::new();
        for (pos, item) in items.iter().enumerate() {
            if item.id != pos {
                return Err(Error::Invariant {
                    line: pos + 1,
                    msg: format!("knowledge ids must be 0..n in order; expected {pos}, found {}", item.id),
                });
            }
            if item.text.trim().is_empty() {
                return Err(Error::Invariant {
                    line: pos + 1,
                    msg: "knowledge text is empty".into(),
                });
            }
            let toks = tokenize(&item.title);
            if toks.len() == 1 {
                title_index.entry(toks.into_iter().next().unwrap_or_default()).or_insert(item.id);
            }
        }
        Ok(KnowledgeBase { items, title_index })
    }

    pub fn items(&self) -> &[KnowledgeItem] {
        &self.items
    }

    pub fn get(&self, id: usize) -> Option<&KnowledgeItem> {
        self.items.get(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item whose single-token title equals `token` (case-insensitive).
    pub fn title_match(&self, token: &str) -> Option<usize> {
        self.title_index.get(&token.to_lowercase()).copied()
    }

    pub fn title_index(&self) -> &HashMap<String, usize> {
        &self.title_index
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("knowledge items serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<KnowledgeBase> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            items.push(parse_kb_line(line, n + 1)?);
        }
        Self::from_items(items)
    }

    pub fn load(path: &Path) -> Result<KnowledgeBase> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

fn parse_err(line: usize, e: serde_json::Error) -> Error {
    Error::Parse { line, msg: e.to_string() }
}

pub fn parse_article_line(line: &str, line_no: usize) -> Result<Article> {
    serde_json::from_str(line).map_err(|e| parse_err(line_no, e))
}

pub fn parse_kb_line(line: &str, line_no: usize) -> Result<KnowledgeItem> {
    serde_json::from_str(line).map_err(|e| parse_err(line_no, e))
}

/// Build a knowledge base from the text of an articles file. Blank lines are
/// skipped; ids follow file order.
pub fn knowledge_base_from_articles(text: &str) -> Result<KnowledgeBase> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let article = parse_article_line(line, n + 1)?;
        let first = extract_first_sentence(&article.text).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        items.push(KnowledgeItem {
            id: items.len(),
            title: article.title,
            text: first,
        });
    }
    KnowledgeBase::from_items(items)
}

pub fn build_knowledge_base(articles_path: &Path) -> Result<KnowledgeBase> {
    knowledge_base_from_articles(&std::fs::read_to_string(articles_path)?)
}
