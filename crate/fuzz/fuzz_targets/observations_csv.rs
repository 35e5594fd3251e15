#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((obs, _)) = auroral::ingest::read_observations(data) {
        assert!(obs.iter().all(|o| o.eflux > 0.0));
    }
});
