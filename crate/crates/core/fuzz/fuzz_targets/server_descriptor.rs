#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::a2m::client::parse_server_descriptor;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((host, _port)) = parse_server_descriptor(text) {
        assert!(!host.is_empty());
    }
});
