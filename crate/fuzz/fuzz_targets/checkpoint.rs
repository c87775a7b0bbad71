#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki::model::{Checkpoint, DialogModel};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("encoded checkpoint to decode");
        assert_eq!(again.to_bytes(), bytes);
        // Restoring may fail on a mismatched layout, but must not panic.
        let _ = DialogModel::from_checkpoint(&ck);
    }
});
