#![no_main]

use libfuzzer_sys::fuzz_target;
use sos_core::data::parse_scores_jsonl;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_scores_jsonl(text);
    }
});
