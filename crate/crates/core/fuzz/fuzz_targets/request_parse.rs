#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::a2m::ClientRequest;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = ClientRequest::parse(data) {
        let _ = req.body();
        let back = ClientRequest::parse(&req.to_bytes()).unwrap();
        assert_eq!(back.request_id, req.request_id);
    }
});
