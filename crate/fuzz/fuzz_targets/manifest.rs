#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::harness::manifest::{manifest_text, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(entries) = parse_manifest(text) {
        assert_eq!(
            parse_manifest(&manifest_text(&entries)).expect("written manifest re-parses"),
            entries
        );
    }
});
