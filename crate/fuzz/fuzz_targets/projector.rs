#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::embedspace::parse_projector;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = parse_projector(text) {
        assert_eq!(
            parse_projector(&p.to_text()).expect("written projector re-parses"),
            p
        );
    }
});
