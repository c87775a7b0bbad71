#![no_main]
use libfuzzer_sys::fuzz_target;

use lexki_cli::config::{Preset, RunConfig};

fuzz_target!(|data: &str| {
    if let Ok(c) = RunConfig::from_toml(data, Preset::Desk) {
        let again = RunConfig::from_toml(&c.to_toml(), Preset::Desk).expect("resolved config to parse");
        assert_eq!(again, c);
    }
});
