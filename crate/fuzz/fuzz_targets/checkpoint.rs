#![no_main]

use libfuzzer_sys::fuzz_target;
use tosa_core::model::Model;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = Model::from_bytes(data) {
        let again = Model::from_bytes(&model.to_bytes()).expect("encoded checkpoint decodes");
        assert_eq!(again, model);
    }
});
