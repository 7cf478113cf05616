#![no_main]

use libfuzzer_sys::fuzz_target;
use tosa_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        // The rendered form parses back to the same config.
        let again = RunConfig::parse(&cfg.render()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
