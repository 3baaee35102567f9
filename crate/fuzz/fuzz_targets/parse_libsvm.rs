#![no_main]

use fednew_core::dataset::{parse_libsvm_str, to_libsvm, ParseOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = parse_libsvm_str(text, ParseOptions::default()) {
        // Whatever parses must survive a write/read round trip.
        let again = parse_libsvm_str(&to_libsvm(&ds), ParseOptions { dim_override: Some(ds.dim) })
            .expect("round trip");
        assert_eq!(again.samples.len(), ds.samples.len());
    }
});
