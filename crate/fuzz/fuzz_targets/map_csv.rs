#![no_main]

use auroral::eval::read_map_csv;
use auroral::geomodel::GridSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let spec = GridSpec::new(4, 4).expect("valid grid");
    let _ = read_map_csv(data, spec);
});
