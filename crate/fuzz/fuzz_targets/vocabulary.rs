#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::embedspace::parse_vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(vocab) = parse_vocabulary(text) {
        let again = parse_vocabulary(&vocab.to_text()).expect("written vocabulary re-parses");
        assert_eq!(vocab.tokens(), again.tokens());
        assert_eq!(vocab.embeddings(), again.embeddings());
    }
});
