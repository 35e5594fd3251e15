#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = auroral::ingest::read_drivers(data) {
        assert!(d.cadence > 0);
    }
});
