#![no_main]

use auroral::models::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_checkpoint(data) {
        assert_eq!(decode_checkpoint(&encode_checkpoint(&m)).expect("round trip"), m);
    }
});
