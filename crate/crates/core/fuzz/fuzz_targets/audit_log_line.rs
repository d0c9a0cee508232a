#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::auditor::log::parse_audit_log;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_audit_log(text) {
        for r in records {
            let line = serde_json::to_string(&r).unwrap();
            assert_eq!(parse_audit_log(&line).unwrap(), vec![r]);
        }
    }
});
