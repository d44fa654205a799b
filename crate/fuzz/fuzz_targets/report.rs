#![no_main]

use libfuzzer_sys::fuzz_target;
use vlmshield::harness::report::{parse_report, report_string, write_distributions, Summary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_report(text) {
        let written = report_string(&rows, &Summary::default());
        assert_eq!(
            parse_report(&written).expect("written report re-parses"),
            rows
        );
        write_distributions(std::io::sink(), &rows).expect("histograms of parsed rows");
    }
});
