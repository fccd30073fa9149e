use std::fmt::{Display, Write as _};

/// Outcome of one named check. `passed` is `None` for informational checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: Option<bool>,
    pub values: Vec<(String, String)>,
}

impl Check {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: None,
            values: Vec::new(),
        }
    }

    pub fn value(mut self, key: &str, v: impl Display) -> Self {
        self.values.push((key.to_string(), v.to_string()));
        self
    }

    pub fn list(self, key: &str, vs: &[f64]) -> Self {
        let joined = vs
            .iter()
            .map(|v| format!("{v:.6e}"))
            .collect::<Vec<_>>()
            .join(", ");
        self.value(key, format!("[{joined}]"))
    }

    pub fn verdict(mut self, passed: bool) -> Self {
        self.passed = Some(passed);
        self
    }

    /// A check that could not run counts as a failure.
    pub fn errored(name: impl Into<String>, err: impl Display) -> Self {
        Self::new(name).value("error", err).verdict(false)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed != Some(false))
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.passed == Some(false))
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `key = value` lines grouped under `[check]` headers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "passed = {}", self.passed());
        for c in &self.checks {
            let status = match c.passed {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "info",
            };
            let _ = writeln!(s, "\n[{}]\nstatus = {status}", c.name);
            for (k, v) in &c.values {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}
