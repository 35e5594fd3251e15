#![no_main]

use auroral::ingest::{decode_table, encode_table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_table(data) {
        let again = decode_table(&encode_table(&t)).expect("re-encoded cache decodes");
        assert_eq!(again.len(), t.len());
    }
});
