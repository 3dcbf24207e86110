#![no_main]

use libfuzzer_sys::fuzz_target;
use neural_duel::net::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&params), data);
    }
});
