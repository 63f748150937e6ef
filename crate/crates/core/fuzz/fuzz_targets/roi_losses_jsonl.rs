#![no_main]

use libfuzzer_sys::fuzz_target;
use sos_core::split::{parse_roi_losses_jsonl, split_loss_image};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(bs) = parse_roi_losses_jsonl(text) {
        for b in &bs {
            let _ = split_loss_image(b);
        }
    }
});
