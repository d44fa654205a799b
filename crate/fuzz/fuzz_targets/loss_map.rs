#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::errormap::parse_loss_map;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = parse_loss_map(text) {
        // Export is lossless.
        let again = parse_loss_map(&map.to_text()).expect("exported map re-parses");
        assert_eq!(map.values(), again.values());
        assert_eq!((map.rows(), map.cols()), (again.rows(), again.cols()));
    }
});
