#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::corpus::{parse_kb_line, KnowledgeBase};

fuzz_target!(|data: &str| {
    let _ = parse_kb_line(data, 1);
    if let Ok(kb) = KnowledgeBase::from_jsonl(data) {
        let again = KnowledgeBase::from_jsonl(&kb.to_jsonl()).expect("kb to round trip");
        assert_eq!(again, kb);
    }
});
