#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::corpus::{detokenize, tokenize};

fuzz_target!(|data: &str| {
    let toks = tokenize(data);
    for t in &toks {
        assert!(!t.is_empty());
        assert!(!t.chars().any(char::is_whitespace));
    }
    let _ = detokenize(&toks);
});
