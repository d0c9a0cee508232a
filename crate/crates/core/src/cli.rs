//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 expectation mismatch, 2 usage or parse error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::auditor::log::parse_audit_log;
use crate::auditor::rules::{parse_rules, render_rules};
use crate::auditor::AuditRecord;
use crate::clock::SystemClock;
use crate::model::Verdict;
use crate::monitor::{LoadedConfig, PumpMode, Server, SessionEnv};
use crate::scenario::{self, RunOptions, ScenarioBundle};
use crate::tracer::EnforcementPolicy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "agentguard", version, about = "Runtime security monitor for tool-executing agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the monitor server until SIGINT or SIGTERM.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides listen_addr from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Replay a scenario bundle end to end and compare with its expectations.
    Replay {
        dir: PathBuf,
        /// Go through a real TCP socket instead of the in-memory channel.
        #[arg(long)]
        over_tcp: bool,
        #[arg(long)]
        json: bool,
    },
    /// Parse and validate a file, then print its canonical rendering.
    Check {
        what: CheckKind,
        path: PathBuf,
    },
    /// Print an audit log.
    Log {
        file: PathBuf,
        /// field=value, with field one of pid, epoch, verdict, via. Repeatable.
        #[arg(long = "filter", value_name = "FIELD=VALUE")]
        filters: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    Config,
    Policy,
    Rules,
    Scenario,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match cli.command {
        Command::Serve { config, listen } => serve(&config, listen, err),
        Command::Replay { dir, over_tcp, json } => replay(&dir, over_tcp, json, out, err),
        Command::Check { what, path } => check(what, &path, out, err),
        Command::Log { file, filters, json } => log(&file, &filters, json, out, err),
    }
}

fn fail(err: &mut dyn Write, msg: impl std::fmt::Display) -> i32 {
    let _ = writeln!(err, "error: {msg}");
    EXIT_USAGE
}

fn serve(config: &Path, listen: Option<String>, err: &mut dyn Write) -> i32 {
    let loaded = match LoadedConfig::load(config) {
        Ok(l) => l,
        Err(e) => return fail(err, e),
    };
    tracing::info!(policy = %loaded.policy.render(), "effective policy");
    let env = match SessionEnv::from_loaded(&loaded, Arc::new(SystemClock::new()), None) {
        Ok(e) => e,
        Err(e) => return fail(err, e),
    };
    let addr = listen.unwrap_or_else(|| loaded.config.listen_addr.clone());
    let server = match Server::bind(
        &addr,
        Arc::new(env),
        loaded.config.hello_timeout(),
        Arc::new(SystemClock::new()),
        PumpMode::Auto,
    ) {
        Ok(s) => s,
        Err(e) => return fail(err, e),
    };
    let flag = server.shutdown_flag();
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        if let Err(e) = signal_hook::flag::register(sig, flag.clone()) {
            return fail(err, format!("cannot install signal handler: {e}"));
        }
    }
    let _ = writeln!(err, "listening on {}", server.local_addr());
    match server.run() {
        Ok(()) => EXIT_OK,
        Err(e) => fail(err, e),
    }
}

fn replay(dir: &Path, over_tcp: bool, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let bundle = match ScenarioBundle::load(dir) {
        Ok(b) => b,
        Err(e) => return fail(err, e),
    };
    let outcome = match scenario::run(&bundle, RunOptions { over_tcp }) {
        Ok(o) => o,
        Err(e) => return fail(err, e),
    };
    let text = if json {
        outcome.report.render_json()
    } else {
        outcome.report.render_text()
    };
    let _ = out.write_all(text.as_bytes());
    if outcome.report.passed {
        EXIT_OK
    } else {
        EXIT_MISMATCH
    }
}

fn check(what: CheckKind, path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let rendered = match what {
        CheckKind::Config => LoadedConfig::load(path).map_err(|e| e.to_string()).map(|l| {
            let mut s = l.config.render();
            s.push_str("\n# effective policy\n");
            s.push_str(&l.policy.render());
            if !l.rules.is_empty() {
                s.push_str("\n# rules\n");
                s.push_str(&render_rules(&l.rules));
            }
            s
        }),
        CheckKind::Policy => EnforcementPolicy::load(path).map(|p| p.render()).map_err(|e| e.to_string()),
        CheckKind::Rules => std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))
            .and_then(|t| {
                parse_rules(&t)
                    .map(|r| render_rules(&r))
                    .map_err(|e| format!("{}: {e}", path.display()))
            }),
        CheckKind::Scenario => ScenarioBundle::load(path).map(|b| b.render()).map_err(|e| e.to_string()),
    };
    match rendered {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => fail(err, e),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Filter {
    Pid(u32),
    Epoch(u64),
    Verdict(Verdict),
    Via(String),
}

impl Filter {
    fn parse(s: &str) -> Result<Self, String> {
        let (field, value) = s
            .split_once('=')
            .ok_or_else(|| format!("filter {s:?} is not FIELD=VALUE"))?;
        let bad = |_| format!("bad value {value:?} for {field}");
        match field {
            "pid" => value.parse().map(Filter::Pid).map_err(bad),
            "epoch" => value.parse().map(Filter::Epoch).map_err(bad),
            "verdict" => match value {
                "resume" => Ok(Filter::Verdict(Verdict::Resume)),
                "terminate" => Ok(Filter::Verdict(Verdict::Terminate)),
                _ => Err(format!("bad value {value:?} for verdict (resume|terminate)")),
            },
            "via" => match value {
                "rule" | "cache" | "model" | "fail_closed" => Ok(Filter::Via(value.to_string())),
                _ => Err(format!("bad value {value:?} for via (rule|cache|model|fail_closed)")),
            },
            _ => Err(format!("unknown filter field {field:?} (pid|epoch|verdict|via)")),
        }
    }

    fn matches(&self, r: &AuditRecord) -> bool {
        match self {
            Filter::Pid(p) => r.pid == *p,
            Filter::Epoch(e) => r.epoch == *e,
            Filter::Verdict(v) => r.decision.verdict == *v,
            Filter::Via(v) => r.decided_by.via() == v,
        }
    }
}

fn log(file: &Path, filters: &[String], json: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let filters: Vec<Filter> = match filters.iter().map(|f| Filter::parse(f)).collect() {
        Ok(f) => f,
        Err(e) => return fail(err, e),
    };
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => return fail(err, format!("cannot read {}: {e}", file.display())),
    };
    let records = match parse_audit_log(&text) {
        Ok(r) => r,
        Err(e) => return fail(err, format!("{}: {e}", file.display())),
    };
    let shown: Vec<&AuditRecord> = records.iter().filter(|r| filters.iter().all(|f| f.matches(r))).collect();
    if json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&shown).expect("records serialize"));
    } else {
        let _ = writeln!(
            out,
            "{:>6} {:>7} {:>5} {:<12} {:<9} {:<11} {:>10}  EXPLANATION",
            "SEQ", "PID", "EPOCH", "KIND", "VERDICT", "VIA", "ELAPSED_MS"
        );
        for r in shown {
            let _ = writeln!(
                out,
                "{:>6} {:>7} {:>5} {:<12} {:<9} {:<11} {:>10}  {}",
                r.seq,
                r.pid,
                r.epoch,
                r.event.kind().as_str(),
                r.decision.verdict.as_str(),
                r.decided_by.via(),
                r.elapsed_ms,
                r.decision.explanation
            );
        }
    }
    EXIT_OK
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("agentguard").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn filters_parse() {
        assert_eq!(Filter::parse("pid=4").unwrap(), Filter::Pid(4));
        assert_eq!(Filter::parse("verdict=terminate").unwrap(), Filter::Verdict(Verdict::Terminate));
        assert!(Filter::parse("colour=red").unwrap_err().contains("unknown filter field"));
        assert!(Filter::parse("pid=x").is_err());
        assert!(Filter::parse("pid").is_err());
    }

    #[test]
    fn empty_log_prints_an_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.audit.jsonl");
        std::fs::write(&f, "").unwrap();
        let (code, out, _) = run_cli(&["log", f.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 1);
        let (code, out, _) = run_cli(&["log", f.to_str().unwrap(), "--json"]);
        assert_eq!((code, out.trim()), (0, "[]"));
        let (code, _, err) = run_cli(&["log", f.to_str().unwrap(), "--filter", "host=x"]);
        assert_eq!(code, 2);
        assert!(err.contains("host"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(&["frobnicate"]).0, 2);
        assert_eq!(run_cli(&["check", "yaml", "x"]).0, 2);
        assert_eq!(run_cli(&["--help"]).0, 0);
    }

    #[test]
    fn check_rules_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("rules.toml");
        std::fs::write(&f, "[[rule]]\nid = \"a\"\nverdict = \"safe\"\npath_glob = \"/tmp/[\"\n").unwrap();
        let (code, _, err) = run_cli(&["check", "rules", f.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(err.contains("line 4"), "{err}");

        std::fs::write(&f, "[[rule]]\nid = \"a\"\nverdict = \"safe\"\n[[rule]]\nid = \"a\"\nverdict = \"unsafe\"\n").unwrap();
        assert_eq!(run_cli(&["check", "rules", f.to_str().unwrap()]).0, 2);

        std::fs::write(&f, "[[rule]]\nid = \"a\"\nverdict = \"safe\"\n").unwrap();
        let (code, out, _) = run_cli(&["check", "rules", f.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(out.contains("id = \"a\""));
    }
}
