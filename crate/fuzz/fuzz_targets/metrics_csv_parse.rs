#![no_main]

use fednew_core::harness::{parse_metrics_csv, summarize_rows};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_metrics_csv(text) {
        let _ = summarize_rows("fuzz", &rows, &[1e-4]);
    }
});
