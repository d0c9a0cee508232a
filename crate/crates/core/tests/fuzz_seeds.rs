//! Runs every checked-in fuzz corpus seed through the same checks as the
//! fuzz targets, so the seeds stay meaningful on a stable toolchain.

use std::path::{Path, PathBuf};

use agentguard::a2m::client::parse_server_descriptor;
use agentguard::a2m::hello::accept_hello;
use agentguard::a2m::{encode_frame, ClientRequest, FrameDecoder, Hello};
use agentguard::auditor::backend::{parse_model_response, parse_stub_script};
use agentguard::auditor::log::parse_audit_log;
use agentguard::auditor::rules::{parse_rules, render_rules};
use agentguard::auditor::StubAuditor;
use agentguard::monitor::MonitorConfig;
use agentguard::scenario::{parse_client_script, parse_expected};
use agentguard::tracer::event::{parse_trace_jsonl, render_trace_jsonl};
use agentguard::tracer::EnforcementPolicy;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut seeds: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty(), "no seeds for {target}");
    seeds
}

fn texts(target: &str) -> Vec<(PathBuf, String)> {
    corpus(target)
        .into_iter()
        .map(|(p, b)| (p, String::from_utf8(b).unwrap()))
        .collect()
}

#[test]
fn frame_decode_seeds() {
    let mut frames = 0;
    for (_, data) in corpus("frame_decode") {
        let (sel, data) = data.split_first().unwrap();
        let cut = *sel as usize % (data.len() + 1);
        let mut dec = FrameDecoder::new(4096);
        dec.push(&data[..cut]);
        dec.push(&data[cut..]);
        while let Ok(Some(frame)) = dec.next_frame() {
            assert_eq!(&encode_frame(&frame).unwrap()[4..], &frame[..]);
            frames += 1;
        }
    }
    assert!(frames >= 2);
}

#[test]
fn request_parse_seeds() {
    let mut bodies = 0;
    for (p, data) in corpus("request_parse") {
        let req = ClientRequest::parse(&data).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ClientRequest::parse(&req.to_bytes()).unwrap(), req);
        bodies += req.body().is_ok() as usize;
    }
    assert_eq!(bodies, 3);
}

#[test]
fn hello_parse_seeds() {
    let mut accepted = 0;
    for (_, data) in corpus("hello_parse") {
        let _ = Hello::parse(&data);
        let (reply, result) = accept_hello(&data);
        Hello::parse(&reply.to_bytes()).unwrap();
        if let Ok(nonce) = result {
            assert_eq!(reply.nonce, nonce);
            accepted += 1;
        }
    }
    assert_eq!(accepted, 1);
}

#[test]
fn trace_jsonl_seeds() {
    for (p, text) in texts("trace_jsonl") {
        match parse_trace_jsonl(&text) {
            Ok(events) => assert_eq!(parse_trace_jsonl(&render_trace_jsonl(&events)).unwrap(), events),
            Err(e) => assert!(p.ends_with("non-monotonic"), "{}: {e}", p.display()),
        }
    }
}

#[test]
fn rule_file_seeds() {
    for (_, text) in texts("rule_file") {
        let rules = parse_rules(&text).unwrap();
        let rendered = render_rules(&rules);
        assert_eq!(render_rules(&parse_rules(&rendered).unwrap()), rendered);
    }
}

#[test]
fn stub_script_seeds() {
    for (p, text) in texts("stub_script") {
        parse_stub_script(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        StubAuditor::from_script(&text).unwrap();
    }
}

#[test]
fn model_response_seeds() {
    let ok: Vec<bool> = texts("model_response")
        .iter()
        .map(|(_, t)| parse_model_response(t).is_ok())
        .collect();
    // bad-verdict, fenced, resume
    assert_eq!(ok, [false, true, true]);
}

#[test]
fn policy_seeds() {
    for (_, text) in texts("policy") {
        let p = EnforcementPolicy::parse(&text, Path::new("seed.toml")).unwrap();
        let rendered = p.render();
        assert_eq!(EnforcementPolicy::parse(&rendered, Path::new("seed.toml")).unwrap().render(), rendered);
    }
}

#[test]
fn config_seeds() {
    let ok: Vec<bool> = texts("config")
        .iter()
        .map(|(_, t)| MonitorConfig::parse(t, Path::new("/seed/monitor.toml")).is_ok())
        .collect();
    // doc-example, zero-timeout
    assert_eq!(ok, [true, false]);
}

#[test]
fn audit_log_line_seeds() {
    for (_, text) in texts("audit_log_line") {
        for r in parse_audit_log(&text).unwrap() {
            let line = serde_json::to_string(&r).unwrap();
            assert_eq!(parse_audit_log(&line).unwrap(), vec![r]);
        }
    }
}

#[test]
fn server_descriptor_seeds() {
    let parsed: Vec<_> = texts("server_descriptor")
        .iter()
        .map(|(_, t)| parse_server_descriptor(t).ok())
        .collect();
    // no-port, v4, v6
    assert_eq!(
        parsed,
        [None, Some(("127.0.0.1".into(), 7700)), Some(("::1".into(), 7700))]
    );
}

#[test]
fn client_script_seeds() {
    for (p, text) in texts("client_script") {
        let script = parse_client_script(&text).is_ok();
        let expected = parse_expected(&text).is_ok();
        assert!(script != expected, "{}: exactly one reading should apply", p.display());
    }
}
