//! Run configuration: a TOML file with one table per concern, every key
//! optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use dfp::agent::{AgentConfig, AgentParams, NetworkConfig};
use dfp::losses::DriftLossConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that relative output directories resolve against.
pub const OUTPUT_ROOT_VAR: &str = "DFP_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Offline,
    Online,
    OfflineToOnline,
}

impl RunPhase {
    pub fn has_offline(self) -> bool {
        matches!(self, RunPhase::Offline | RunPhase::OfflineToOnline)
    }

    pub fn has_online(self) -> bool {
        matches!(self, RunPhase::Online | RunPhase::OfflineToOnline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub env_id: String,
    pub seed: u64,
    pub phase: RunPhase,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub output_dir: PathBuf,
    /// Offline dataset; empty means `<output_dir>/dataset.bin`.
    pub dataset: PathBuf,
    pub log_interval: usize,
    /// Zero keeps only the final checkpoint.
    pub checkpoint_interval: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            env_id: dfp::envs::BANDIT_ID.to_string(),
            seed: 0,
            phase: RunPhase::OfflineToOnline,
            offline_steps: 20_000,
            online_steps: 20_000,
            output_dir: PathBuf::from("runs/default"),
            dataset: PathBuf::new(),
            log_interval: 1000,
            checkpoint_interval: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub episodes: usize,
    /// Standard deviation of the demonstrator's action noise.
    pub noise_scale: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes: 1000,
            noise_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Training steps between evaluations; zero evaluates only at the end
    /// of each phase.
    pub interval: usize,
    pub episodes: usize,
    /// Policy samples per state for mode coverage.
    pub coverage_samples: usize,
    pub coverage_radius: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            interval: 5000,
            episodes: 20,
            coverage_samples: 1000,
            coverage_radius: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub agent: AgentParams,
    pub network: NetworkConfig,
    pub loss: DriftLossConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(vec![e.message().to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides such as `agent.gamma=0.9`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(vec![e.message().to_string()]))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_toml(&toml::to_string(&doc).expect("table serialises"))
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            agent: self.agent.clone(),
            network: self.network.clone(),
            loss: self.loss.clone(),
        }
    }

    /// Every invalid field, as `section.field: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut add = |section: &str, items: Vec<String>| {
            out.extend(items.into_iter().map(|p| format!("{section}.{p}")));
        };
        let mut run = Vec::new();
        if self.run.env_id.is_empty() {
            run.push("env_id: must name an environment".to_string());
        } else if dfp::envs::make_env(&self.run.env_id).is_err() {
            run.push(format!(
                "env_id: unknown environment `{}` (expected {} or {})",
                self.run.env_id,
                dfp::envs::BANDIT_ID,
                dfp::envs::MAZE_ID
            ));
        }
        if self.run.output_dir.as_os_str().is_empty() {
            run.push("output_dir: must not be empty".to_string());
        }
        if self.run.log_interval == 0 {
            run.push("log_interval: must be >= 1".to_string());
        }
        add("run", run);
        let mut data = Vec::new();
        if !(self.data.noise_scale >= 0.0 && self.data.noise_scale.is_finite()) {
            data.push(format!("noise_scale: must be >= 0, got {}", self.data.noise_scale));
        }
        add("data", data);
        let mut eval = Vec::new();
        if !(self.eval.coverage_radius > 0.0 && self.eval.coverage_radius.is_finite()) {
            eval.push(format!(
                "coverage_radius: must be positive, got {}",
                self.eval.coverage_radius
            ));
        }
        add("eval", eval);
        add("agent", self.agent.problems());
        add("network", self.network.problems());
        add("loss", self.loss.problems());
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(p))
        }
    }

    /// Output directory, resolved against `$DFP_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.run.output_dir)
    }

    pub fn dataset_path(&self) -> PathBuf {
        if self.run.dataset.as_os_str().is_empty() {
            self.output_dir().join("dataset.bin")
        } else {
            self.run.dataset.clone()
        }
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// `section.key=value`; the value is parsed as a TOML literal and falls back
/// to a plain string.
fn apply_override(doc: &mut toml::Table, text: &str) -> Result<(), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{text}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
