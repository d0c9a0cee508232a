#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::auditor::rules::{parse_rules, render_rules};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rules) = parse_rules(text) {
        let rendered = render_rules(&rules);
        assert_eq!(render_rules(&parse_rules(&rendered).unwrap()), rendered);
    }
});
