#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::corpus::Vocabulary;

fuzz_target!(|data: &str| {
    if let Ok(v) = Vocabulary::from_text(data) {
        let again = Vocabulary::from_text(&v.to_text()).expect("vocabulary to round trip");
        assert_eq!(again.tokens(), v.tokens());
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.get(t), Some(i));
        }
    }
});
