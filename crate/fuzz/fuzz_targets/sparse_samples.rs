#![no_main]

use auroral::train::{decode_sparse, encode_sparse};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((samples, schema, grid)) = decode_sparse(data) {
        let again = decode_sparse(&encode_sparse(&samples, &schema, grid)).expect("re-encoded samples decode");
        assert_eq!(again.0.len(), samples.len());
        assert_eq!(again.2, grid);
    }
});
