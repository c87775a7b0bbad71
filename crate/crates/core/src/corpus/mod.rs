//! Text ingestion: tokenizer, vocabulary, stopwords, knowledge base and the
//! JSON-lines dialog format.

mod dialog;
mod kb;
mod stopwords;
mod text;
mod vocab;

pub use dialog::{dialog_corpus_to_jsonl, load_dialog_corpus, parse_dialog_corpus, parse_dialog_line, DialogExample};
pub use kb::{
    build_knowledge_base, knowledge_base_from_articles, parse_article_line, parse_kb_line, Article, KnowledgeBase,
    KnowledgeItem,
};
pub use stopwords::StopwordList;
pub use text::{detokenize, extract_first_sentence, is_punct, is_punct_token, tokenize};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
