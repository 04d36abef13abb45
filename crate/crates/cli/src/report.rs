//! Machine-readable outcome of one command, as `key=value` lines:
//!
//! ```text
//! command=verify-decomposition
//! status=fail
//! exit=1
//! checks=2
//! failed=1
//! check.f32=fail
//! detail.f32=max abs error 2.1e-6, tolerance 1e-6
//! value.trials=100
//! ```

use std::fmt::Write as _;

pub const EXIT_PASS: u8 = 0;
pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// An error that ends the command early.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<hypercorr::Error> for Failure {
    fn from(e: hypercorr::Error) -> Self {
        let code = match e {
            hypercorr::Error::NonFiniteLoss { .. } => EXIT_CHECK,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug)]
struct Check {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Debug)]
pub struct Report {
    command: &'static str,
    checks: Vec<Check>,
    values: Vec<(String, String)>,
    error: Option<String>,
    code: Option<u8>,
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

impl Report {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            checks: Vec::new(),
            values: Vec::new(),
            error: None,
            code: None,
        }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> bool {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
        passed
    }

    pub fn value(&mut self, key: impl Into<String>, v: impl ToString) {
        self.values.push((key.into(), v.to_string()));
    }

    pub fn fail_with(&mut self, f: &Failure) {
        self.error = Some(f.message.clone());
        self.code = Some(f.code);
    }

    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn exit_code(&self) -> u8 {
        match self.code {
            Some(c) => c,
            None if self.failed() > 0 => EXIT_CHECK,
            None => EXIT_PASS,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let code = self.exit_code();
        let status = match code {
            EXIT_PASS => "pass",
            EXIT_CHECK => "fail",
            _ => "error",
        };
        writeln!(s, "command={}", self.command).unwrap();
        writeln!(s, "status={status}").unwrap();
        writeln!(s, "exit={code}").unwrap();
        if let Some(e) = &self.error {
            writeln!(s, "error={}", one_line(e)).unwrap();
        }
        writeln!(s, "checks={}", self.checks.len()).unwrap();
        writeln!(s, "failed={}", self.failed()).unwrap();
        for c in &self.checks {
            writeln!(s, "check.{}={}", c.name, if c.passed { "pass" } else { "fail" }).unwrap();
            writeln!(s, "detail.{}={}", c.name, one_line(&c.detail)).unwrap();
        }
        for (k, v) in &self.values {
            writeln!(s, "value.{k}={}", one_line(v)).unwrap();
        }
        s
    }
}
