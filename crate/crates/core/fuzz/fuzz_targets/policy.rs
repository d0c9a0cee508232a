#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

use agentguard::tracer::EnforcementPolicy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = EnforcementPolicy::parse(text, Path::new("fuzz.toml")) {
        let rendered = p.render();
        let back = EnforcementPolicy::parse(&rendered, Path::new("fuzz.toml")).unwrap();
        assert_eq!(back.render(), rendered);
    }
});
