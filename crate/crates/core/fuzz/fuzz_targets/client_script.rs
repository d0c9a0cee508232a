#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::scenario::{parse_client_script, parse_expected};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_client_script(text);
    let _ = parse_expected(text);
});
