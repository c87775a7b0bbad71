#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::retriever::{alignments_to_jsonl, parse_alignment_line, parse_alignments};

fuzz_target!(|data: &str| {
    let _ = parse_alignment_line(data, 1);
    if let Ok(records) = parse_alignments(data) {
        let again = parse_alignments(&alignments_to_jsonl(&records)).expect("alignments to round trip");
        assert_eq!(again, records);
    }
});
