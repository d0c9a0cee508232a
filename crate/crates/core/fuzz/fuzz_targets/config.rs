#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

use agentguard::monitor::MonitorConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = MonitorConfig::parse(text, Path::new("/fuzz/monitor.toml"));
});
