#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode(data) {
        let png = img.encode_png().expect("decoded images encode");
        let back = Image::decode(&png).expect("own PNG decodes");
        assert!(back.same_shape(&img));
    }
});
