#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::tracer::event::{parse_trace_jsonl, render_trace_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(events) = parse_trace_jsonl(text) {
        let back = parse_trace_jsonl(&render_trace_jsonl(&events)).unwrap();
        assert_eq!(back, events);
    }
});
