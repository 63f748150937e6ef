#![no_main]

use libfuzzer_sys::fuzz_target;
use sos_core::data::{manifest_to_bytes, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text) {
        let bytes = manifest_to_bytes(&m).expect("parsed manifest serializes");
        parse_manifest(std::str::from_utf8(&bytes).unwrap()).expect("serialized manifest parses");
    }
});
