#![no_main]

use libfuzzer_sys::fuzz_target;
use rda_inr::geometry::io::{parse_grid, write_grid};

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = parse_grid(data) {
        assert_eq!(grid.values.len(), grid.node_count());
        let _ = write_grid(&grid);
    }
});
