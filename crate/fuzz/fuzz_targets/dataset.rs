#![no_main]

use libfuzzer_sys::fuzz_target;
use tosa_core::training::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_dataset(data) {
        let again = decode_dataset(&encode_dataset(&set)).expect("encoded dataset decodes");
        assert_eq!(again, set);
    }
});
