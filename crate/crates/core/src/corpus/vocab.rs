use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id mapping with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keep the `max_size - 4` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I, S>(streams: I, max_size: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if max_size < 5 {
            return Err(Error::Config(format!("vocabulary max_size must be >= 5, got {max_size}")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in streams {
            for tok in stream {
                let t = tok.as_ref();
                if t.is_empty() || RESERVED.contains(&t) {
                    continue;
                }
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - RESERVED.len()).map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens_unchecked(tokens))
    }

    /// Vocabulary over every dialog turn and, when given, every knowledge
    /// sentence, so the knowledge encoder shares the dialog's ids.
    pub fn from_corpus(
        examples: &[super::DialogExample],
        kb: Option<&super::KnowledgeBase>,
        max_size: usize,
    ) -> Result<Vocabulary> {
        let mut streams: Vec<Vec<String>> = Vec::new();
        for ex in examples {
            streams.extend(ex.context.iter().map(|c| super::tokenize(c)));
            streams.push(super::tokenize(&ex.utterance));
            streams.push(super::tokenize(&ex.response));
        }
        if let Some(kb) = kb {
            streams.extend(kb.items().iter().map(|i| super::tokenize(&i.text)));
        }
        Self::build(streams.iter().map(Vec::as_slice), max_size)
    }

    fn from_tokens_unchecked(tokens: Vec<String>) -> Vocabulary {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Parse the one-token-per-line file format.
    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::Parse {
                line: tokens.len() + 1,
                msg: "vocabulary is missing reserved tokens".into(),
            });
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {r}, found {:?}", tokens[i]),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "token is empty or contains whitespace".into(),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Hex sha256 of the file form; checkpoints record it to catch mismatched
    /// vocabularies.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK` when out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK])).collect()
    }

    /// Display text for generated ids: stops at eos, drops pad and bos.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect();
        super::text::detokenize(&toks)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
