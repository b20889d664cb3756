#![no_main]

use libfuzzer_sys::fuzz_target;
use rda_inr::train::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&state), data);
    }
});
