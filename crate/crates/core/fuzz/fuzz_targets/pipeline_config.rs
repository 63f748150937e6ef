#![no_main]

use libfuzzer_sys::fuzz_target;
use sos_core::config::parse_pipeline_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_pipeline_config(text) {
        cfg.validate().expect("parsed config is valid");
    }
});
