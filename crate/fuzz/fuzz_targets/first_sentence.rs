#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::corpus::extract_first_sentence;

fuzz_target!(|data: &str| {
    if let Ok(s) = extract_first_sentence(data) {
        assert!(!s.trim().is_empty());
    }
});
