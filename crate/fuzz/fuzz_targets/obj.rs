#![no_main]

use libfuzzer_sys::fuzz_target;
use rda_inr::geometry::io::{parse_obj, write_obj};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mesh) = parse_obj(text) {
        // anything accepted must survive a write/parse cycle
        let again = parse_obj(&write_obj(&mesh)).expect("written OBJ parses");
        assert_eq!(again.faces, mesh.faces);
    }
});
