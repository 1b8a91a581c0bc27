#![no_main]

use libfuzzer_sys::fuzz_target;
use ridnet_core::image::{decode_netpbm, encode_netpbm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_netpbm(data) {
        let again = decode_netpbm(&encode_netpbm(&img)).expect("re-encoded image decodes");
        assert_eq!(again, img);
    }
});
