//! Checked-in fuzz seeds: `seed_valid_*` files parse, `seed_invalid_*`
//! files are rejected.

use std::path::Path;

use sos_core::config::parse_pipeline_config;
use sos_core::data::{
    detections_to_jsonl, manifest_to_bytes, parse_detections_jsonl, parse_manifest, parse_scores_jsonl,
};
use sos_core::split::{parse_roi_losses_jsonl, split_loss_image};

fn parses(target: &str, text: &str) -> bool {
    match target {
        "manifest_json" => parse_manifest(text)
            .map(|m| {
                let bytes = manifest_to_bytes(&m).unwrap();
                parse_manifest(std::str::from_utf8(&bytes).unwrap()).unwrap();
            })
            .is_ok(),
        "detections_jsonl" => parse_detections_jsonl(text)
            .map(|d| parse_detections_jsonl(&detections_to_jsonl(&d).unwrap()).unwrap())
            .is_ok(),
        "scores_jsonl" => parse_scores_jsonl(text).is_ok(),
        "roi_losses_jsonl" => parse_roi_losses_jsonl(text)
            .map(|bs| bs.iter().all(|b| split_loss_image(b).is_ok()))
            .unwrap_or(false),
        "pipeline_config" => parse_pipeline_config(text).is_ok(),
        other => panic!("no parser for corpus {other}"),
    }
}

#[test]
fn seeds_match_their_names() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let mut seen = 0;
    for dir in std::fs::read_dir(&root).unwrap() {
        let dir = dir.unwrap().path();
        let target = dir.file_name().unwrap().to_str().unwrap().to_owned();
        for f in std::fs::read_dir(&dir).unwrap() {
            let f = f.unwrap().path();
            let name = f.file_name().unwrap().to_str().unwrap().to_owned();
            let text = std::fs::read_to_string(&f).unwrap();
            if name.starts_with("seed_valid") {
                assert!(parses(&target, &text), "{target}/{name} should parse");
            } else if name.starts_with("seed_invalid") {
                assert!(!parses(&target, &text), "{target}/{name} should be rejected");
            } else {
                continue;
            }
            seen += 1;
        }
    }
    assert!(seen >= 10, "only {seen} seeds");
}
