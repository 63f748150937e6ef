#![no_main]

use libfuzzer_sys::fuzz_target;
use sos_core::data::{detections_to_jsonl, parse_detections_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = parse_detections_jsonl(text) {
        let text = detections_to_jsonl(&d).expect("parsed detections serialize");
        parse_detections_jsonl(&text).expect("serialized detections parse");
    }
});
