//! Output-directory ownership and crash-safe metric files.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use dfp::agent::{MetricRecord, CSV_HEADER};
use dfp::codec::write_atomic;

use crate::error::CliError;

pub const LOCK_FILE: &str = ".dfp.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Failed(format!(
                "output directory {} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Metrics CSV that is rewritten through a temporary file on every append,
/// so a reader never sees a torn row.
#[derive(Debug)]
pub struct CsvLog {
    path: PathBuf,
    text: String,
}

impl CsvLog {
    pub fn create(path: PathBuf) -> dfp::Result<Self> {
        let log = Self {
            path,
            text: format!("{CSV_HEADER}\n"),
        };
        log.flush()?;
        Ok(log)
    }

    pub fn append(&mut self, rec: &MetricRecord) -> dfp::Result<()> {
        self.text.push_str(&rec.to_csv_row());
        self.text.push('\n');
        self.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn flush(&self) -> dfp::Result<()> {
        write_atomic(&self.path, self.text.as_bytes())
    }
}

/// `key = value` lines, the format of every text report the CLI writes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }
}

pub fn join_f64(vs: &[f64]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
