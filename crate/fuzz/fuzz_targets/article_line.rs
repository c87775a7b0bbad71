#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::corpus::{knowledge_base_from_articles, parse_article_line};

fuzz_target!(|data: &str| {
    let _ = parse_article_line(data, 1);
    if let Ok(kb) = knowledge_base_from_articles(data) {
        assert!(!kb.is_empty());
    }
});
