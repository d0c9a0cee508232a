#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::a2m::hello::accept_hello;
use agentguard::a2m::Hello;

fuzz_target!(|data: &[u8]| {
    let _ = Hello::parse(data);
    let (reply, result) = accept_hello(data);
    Hello::parse(&reply.to_bytes()).unwrap();
    if let Ok(nonce) = result {
        assert_eq!(reply.nonce, nonce);
    }
});
