#![no_main]

use fednew_core::quantizer::{decode, QuantMsg};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = QuantMsg::from_bytes(data) {
        assert_eq!(QuantMsg::from_bytes(&msg.to_bytes()).unwrap(), msg);
        if msg.dim() <= 4096 {
            let prev = vec![0.0; msg.dim()];
            let _ = decode(&msg, &prev);
        }
    }
});
