#![no_main]

use libfuzzer_sys::fuzz_target;
use ridnet_core::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode(data) {
        let bytes = encode(&ck);
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode(&again), bytes);
    }
});
