#![no_main]

use libfuzzer_sys::fuzz_target;
use ridnet_core::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            let canonical = cfg.to_text();
            let again = RunConfig::parse(&canonical).expect("canonical text parses");
            assert_eq!(again.to_text(), canonical);
        }
    }
});
