#![no_main]

use libfuzzer_sys::fuzz_target;
use rda_inr::geometry::io::{parse_points, write_points};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sample) = parse_points(text) {
        let again = parse_points(&write_points(&sample)).expect("written points parse");
        assert_eq!(again.len(), sample.len());
    }
});
