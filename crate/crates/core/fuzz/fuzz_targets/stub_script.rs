#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::auditor::backend::parse_stub_script;
use agentguard::auditor::StubAuditor;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_stub_script(text);
    let _ = StubAuditor::from_script(text);
});
