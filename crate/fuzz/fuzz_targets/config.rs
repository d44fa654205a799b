#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::config::{parse_config, to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config(text) {
        cfg.validate().expect("parsed configs are valid");
        assert_eq!(
            parse_config(&to_text(&cfg)).expect("written config re-parses"),
            cfg
        );
    }
});
