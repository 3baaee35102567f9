#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use fednew_core::config::ExperimentConfig;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).unwrap()
}

pub const SHIPPED: [&str; 4] = ["a1a", "w7a", "w8a", "phishing"];

/// Prints a verdict line straight to stderr, bypassing the test harness'
/// output capture so it shows up for passing tests too.
pub fn verdict(id: &str, ok: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {id}: {} — {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}
