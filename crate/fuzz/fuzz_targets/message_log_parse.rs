#![no_main]

use fednew_core::protocol::{parse_log, AccountingRules, BitLedger};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_log(text) {
        let _ = BitLedger::replay(64, AccountingRules::default(), &records);
    }
});
