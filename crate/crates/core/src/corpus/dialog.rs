use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokenize;
use crate::error::{Error, Result};

/// A context, the utterance X and the response Y.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogExample {
    #[serde(default)]
    pub context: Vec<String>,
    pub utterance: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
}

impl DialogExample {
    pub fn new(utterance: &str, response: &str) -> DialogExample {
        DialogExample {
            context: Vec::new(),
            utterance: utterance.to_string(),
            response: response.to_string(),
            knowledge: None,
        }
    }

    pub fn utterance_tokens(&self) -> Vec<String> {
        tokenize(&self.utterance)
    }

    pub fn response_tokens(&self) -> Vec<String> {
        tokenize(&self.response)
    }
}

pub fn parse_dialog_line(line: &str, line_no: usize) -> Result<DialogExample> {
    let ex: DialogExample = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    if tokenize(&ex.utterance).is_empty() {
        return Err(Error::Invariant {
            line: line_no,
            msg: "utterance is empty".into(),
        });
    }
    if tokenize(&ex.response).is_empty() {
        return Err(Error::Invariant {
            line: line_no,
            msg: "response is empty".into(),
        });
    }
    Ok(ex)
}

/// Parse a dialog JSONL document, preserving order and skipping blank lines.
pub fn parse_dialog_corpus(text: &str) -> Result<Vec<DialogExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_dialog_line(l, n + 1))
        .collect()
}

pub fn load_dialog_corpus(path: &Path) -> Result<Vec<DialogExample>> {
    parse_dialog_corpus(&std::fs::read_to_string(path)?)
}

pub fn dialog_corpus_to_jsonl(examples: &[DialogExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("dialog examples serialize"));
        out.push('\n');
    }
    out
}
