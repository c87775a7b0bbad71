#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::corpus::{dialog_corpus_to_jsonl, parse_dialog_corpus, parse_dialog_line};

fuzz_target!(|data: &str| {
    let _ = parse_dialog_line(data, 1);
    if let Ok(ex) = parse_dialog_corpus(data) {
        let again = parse_dialog_corpus(&dialog_corpus_to_jsonl(&ex)).expect("corpus to round trip");
        assert_eq!(again, ex);
    }
});
