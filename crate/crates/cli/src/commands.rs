//! The five verbs as library functions; `main` only parses arguments and
//! maps errors to exit codes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dfp::agent::{Agent, MetricRecord, Schedule};
use dfp::envs::{
    generate_offline_dataset, make_demonstrator, make_env, ChunkedEnv, Dataset, Environment,
    ReplayBuffer,
};
use dfp::oracle::{mode_coverage, run_suite, Report, Selector, SuiteConfig};
use dfp::DfpRng;
use rand::SeedableRng;

use crate::config::{RunConfig, RunPhase};
use crate::error::CliError;
use crate::io::{join_f64, CsvLog, DirLock, KeyValues};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_REPORT: &str = "eval.txt";

/// Random stream ids derived from the run seed, one per consumer.
const DATA_STREAM: u64 = 7;
const COVERAGE_STREAM: u64 = 8;
/// Distinct start states probed for mode coverage.
const COVERAGE_STATES: usize = 8;

fn stream(seed: u64, id: u64) -> DfpRng {
    let mut rng = DfpRng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The configured environment, wrapped so one action spans the chunk
/// horizon when that is above one.
pub fn build_env(cfg: &RunConfig) -> Result<Box<dyn Environment>, CliError> {
    let inner = make_env(&cfg.run.env_id)?;
    Ok(match cfg.agent.chunk_horizon {
        1 => inner,
        h => Box::new(ChunkedEnv::new(inner, h, cfg.agent.gamma)),
    })
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    dataset.with_file_name(name)
}

#[derive(Debug, Clone)]
pub struct DataSummary {
    pub path: PathBuf,
    pub manifest: KeyValues,
}

pub fn generate_data(cfg: &RunConfig) -> Result<DataSummary, CliError> {
    cfg.validate()?;
    let mut env = make_env(&cfg.run.env_id)?;
    let mut demo = make_demonstrator(&cfg.run.env_id, cfg.data.noise_scale)?;
    let mut rng = stream(cfg.run.seed, DATA_STREAM);
    let ds = generate_offline_dataset(env.as_mut(), demo.as_mut(), cfg.data.episodes, &mut rng)?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ds.save(&path)?;
    let mut m = KeyValues::default();
    m.push("env_id", &ds.env_id);
    m.push("seed", cfg.run.seed);
    m.push("episodes", ds.n_episodes());
    m.push("transitions", ds.transitions.len());
    m.push("noise_scale", cfg.data.noise_scale);
    m.push("mode_balance", join_f64(&ds.mode_balance(demo.n_modes())));
    m.push("success_rate", ds.success_rate());
    m.push("mean_return", ds.mean_return());
    m.write(&manifest_path(&path))?;
    Ok(DataSummary { path, manifest: m })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<MetricRecord>,
    pub actions_generated: u64,
    pub policy_forward_calls: u64,
}

impl TrainSummary {
    /// Evaluation return of the last record that carries one.
    pub fn final_eval_return(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval_return)
    }
}

fn needs_dataset(cfg: &RunConfig) -> bool {
    match cfg.run.phase {
        RunPhase::Offline => cfg.run.offline_steps > 0,
        RunPhase::OfflineToOnline => cfg.run.offline_steps + cfg.run.online_steps > 0,
        RunPhase::Online => false,
    }
}

fn load_offline(cfg: &RunConfig, env: &dyn Environment) -> Result<Dataset, CliError> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::usage(format!(
            "dataset {} not found; run generate-data first",
            path.display()
        )));
    }
    let ds = Dataset::load(&path)?;
    if ds.env_id != env.id() {
        return Err(CliError::usage(format!(
            "dataset {} was generated for `{}`, not `{}`",
            path.display(),
            ds.env_id,
            env.id()
        )));
    }
    Ok(ds)
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let mut env = build_env(cfg)?;
    let mut eval_env = build_env(cfg)?;
    let offline = if needs_dataset(cfg) {
        load_offline(cfg, env.as_ref())?.chunked(cfg.agent.chunk_horizon, cfg.agent.gamma)?
    } else {
        Vec::new()
    };
    let online_steps = if cfg.run.phase.has_online() {
        cfg.run.online_steps
    } else {
        0
    };

    let out = cfg.output_dir();
    let _lock = DirLock::acquire(&out)?;
    dfp::codec::write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut csv = CsvLog::create(out.join(METRICS_FILE))?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let ckpt_every = cfg.run.checkpoint_interval as u64;
    if ckpt_every > 0 {
        std::fs::create_dir_all(&ckpt_dir)?;
    }
    let mut last_ckpt = 0u64;
    let mut observe = |agent: &Agent, rec: &MetricRecord| -> dfp::Result<()> {
        csv.append(rec)?;
        if ckpt_every > 0 && rec.step / ckpt_every > last_ckpt / ckpt_every {
            agent.save(&ckpt_dir.join(format!("step_{:08}.ckpt", rec.step)))?;
            last_ckpt = rec.step;
        }
        Ok(())
    };

    let mut agent = Agent::new(
        cfg.agent_config(),
        env.state_dim(),
        env.action_dim(),
        cfg.run.seed,
    )?;
    let schedule = Schedule {
        log_interval: cfg.run.log_interval,
        eval_interval: if cfg.eval.interval == 0 {
            usize::MAX
        } else {
            cfg.eval.interval
        },
        eval_episodes: cfg.eval.episodes,
    };
    let mut buffer = ReplayBuffer::with_offline(offline, online_steps)?;
    let mut records = Vec::new();
    let mut offset = 0u64;
    if cfg.run.phase.has_offline() {
        records.extend(agent.run_offline_observed(
            &buffer,
            cfg.run.offline_steps,
            &schedule,
            Some(eval_env.as_mut()),
            0,
            &mut observe,
        )?);
        offset = cfg.run.offline_steps as u64;
    }
    if online_steps > 0 {
        records.extend(agent.run_online_observed(
            env.as_mut(),
            &mut buffer,
            online_steps,
            &schedule,
            Some(eval_env.as_mut()),
            offset,
            &mut observe,
        )?);
    }
    let checkpoint = out.join(FINAL_CHECKPOINT);
    agent.save(&checkpoint)?;
    Ok(TrainSummary {
        metrics: csv.path().to_path_buf(),
        output_dir: out,
        checkpoint,
        records,
        actions_generated: agent.actions_generated(),
        policy_forward_calls: agent.policy_forward_calls(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateCoverage {
    pub state: Vec<f64>,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub coverage: Vec<StateCoverage>,
}

impl EvalReport {
    /// Smallest per-mode coverage over all probed states.
    pub fn min_coverage(&self) -> Option<f64> {
        self.coverage
            .iter()
            .flat_map(|c| c.fractions.iter().copied())
            .reduce(f64::min)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("episodes", self.episodes);
        if let (Some(r), Some(s)) = (self.mean_return, self.success_rate) {
            kv.push("mean_return", r);
            kv.push("success_rate", s);
        }
        for (i, c) in self.coverage.iter().enumerate() {
            kv.push(&format!("coverage.{i}.state"), join_f64(&c.state));
            kv.push(&format!("coverage.{i}.fractions"), join_f64(&c.fractions));
        }
        if let Some(m) = self.min_coverage() {
            kv.push("coverage.min", m);
        }
        kv
    }
}

/// Distinct start states, drawn from a fixed stream so every evaluation of a
/// run probes the same ones.
fn probe_states(env: &mut dyn Environment, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, COVERAGE_STREAM);
    let mut states: Vec<Vec<f64>> = Vec::new();
    for _ in 0..4 * COVERAGE_STATES {
        let s = env.reset(&mut rng);
        if !states.contains(&s) {
            states.push(s);
        }
        if states.len() == COVERAGE_STATES {
            break;
        }
    }
    states
}

/// Mode coverage of the policy's samples at the environment's start states.
pub fn policy_coverage(
    agent: &mut Agent,
    env: &mut dyn Environment,
    samples: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<StateCoverage>, CliError> {
    let mut out = Vec::new();
    for state in probe_states(env, seed) {
        let centers = env.mode_centers(&state);
        if centers.is_empty() {
            continue;
        }
        let cov = mode_coverage(|s, n| agent.sample_actions(s, n), &state, samples, &centers, radius)?;
        out.push(StateCoverage {
            state,
            fractions: cov.fractions,
        });
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let mut env = build_env(cfg)?;
    let mut agent = Agent::load(checkpoint, cfg.agent_config())?;
    for (what, want, got) in [
        ("checkpoint state dimension", env.state_dim(), agent.policy().state_dim()),
        ("checkpoint action dimension", env.action_dim(), agent.policy().action_dim()),
    ] {
        if want != got {
            return Err(dfp::Error::DimensionMismatch {
                context: what,
                expected: want,
                got,
            }
            .into());
        }
    }
    let episodes = cfg.eval.episodes;
    let mut report = EvalReport {
        episodes,
        ..EvalReport::default()
    };
    if episodes > 0 {
        let res = agent.evaluate(env.as_mut(), episodes)?;
        report.mean_return = Some(res.mean_return());
        report.success_rate = Some(res.success_rate());
        if cfg.eval.coverage_samples > 0 {
            report.coverage = policy_coverage(
                &mut agent,
                env.as_mut(),
                cfg.eval.coverage_samples,
                cfg.eval.coverage_radius,
                cfg.run.seed,
            )?;
        }
    }
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out)?;
    report.to_key_values().write(&out.join(EVAL_REPORT))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    Lambda,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::K => "K",
            Axis::Lambda => "lambda",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<(), CliError> {
        match self {
            Axis::Lambda => cfg.loss.lambda = value,
            Axis::K => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(CliError::usage(format!("K must be a positive integer, got {value}")));
                }
                cfg.loss.k_positives = value as usize;
            }
        }
        Ok(())
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "K" | "k" => Ok(Axis::K),
            "lambda" => Ok(Axis::Lambda),
            other => Err(CliError::usage(format!(
                "unknown ablation axis `{other}`, expected K or lambda"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Final evaluation return per seed for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub returns: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Sample standard deviation; zero for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.returns.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub baseline: Option<AblationRow>,
    pub rows: Vec<AblationRow>,
    pub table: PathBuf,
}

pub const ABLATION_HEADER: &str = "axis,value,seeds,mean_return,std_return,returns";

impl AblationSummary {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for row in self.baseline.iter().chain(&self.rows) {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.axis,
                row.label,
                row.returns.len(),
                row.mean(),
                row.std(),
                row.returns.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(";")
            ));
        }
        s
    }
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Trains one run per axis value and seed, plus an optional BC-only
/// (`lambda = 0`) baseline per seed, and tabulates final evaluation returns.
/// When no dataset is configured each seed gets its own, generated once.
pub fn ablate(
    cfg: &RunConfig,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
    baseline: bool,
) -> Result<AblationSummary, CliError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(CliError::usage("ablation needs at least one value and one seed"));
    }
    if cfg.eval.episodes == 0 {
        return Err(CliError::config(vec![
            "eval.episodes: ablation compares evaluation returns, must be >= 1".into(),
        ]));
    }
    let root = cfg.output_dir();
    let mut plan: Vec<(usize, RunConfig)> = Vec::new();
    let mut configs: Vec<(String, Option<f64>)> = Vec::new();
    if baseline {
        configs.push(("baseline".into(), None));
    }
    configs.extend(values.iter().map(|&v| (format_value(v), Some(v))));
    for (row, (label, value)) in configs.iter().enumerate() {
        for &seed in seeds {
            let mut c = cfg.clone();
            match value {
                Some(v) => axis.apply(&mut c, *v)?,
                None => c.loss.lambda = 0.0,
            }
            c.run.seed = seed;
            c.run.output_dir = root.join(format!("{axis}_{label}")).join(format!("seed_{seed}"));
            if cfg.run.dataset.as_os_str().is_empty() {
                c.run.dataset = root.join("data").join(format!("seed_{seed}.bin"));
            }
            plan.push((row, c));
        }
    }
    let problems: Vec<String> = plan
        .iter()
        .flat_map(|(_, c)| {
            c.problems()
                .into_iter()
                .map(move |p| format!("{}: {p}", c.run.output_dir.display()))
        })
        .collect();
    if !problems.is_empty() {
        return Err(CliError::config(problems));
    }

    let mut rows: Vec<AblationRow> = configs
        .iter()
        .map(|(label, _)| AblationRow {
            label: label.clone(),
            returns: Vec::new(),
        })
        .collect();
    for (row, c) in &plan {
        if needs_dataset(c) && !c.dataset_path().exists() {
            generate_data(c)?;
        }
        let summary = train(c)?;
        let r = summary.final_eval_return().ok_or_else(|| {
            CliError::Failed(format!("run {} produced no evaluation", c.run.output_dir.display()))
        })?;
        rows[*row].returns.push(r);
    }
    let baseline_row = if baseline { Some(rows.remove(0)) } else { None };
    std::fs::create_dir_all(&root)?;
    let summary = AblationSummary {
        axis,
        seeds: seeds.to_vec(),
        baseline: baseline_row,
        rows,
        table: root.join(format!("ablation_{axis}.csv")),
    };
    dfp::codec::write_atomic(&summary.table, summary.to_csv().as_bytes())?;
    Ok(summary)
}

/// Runs the selected verifiers and always writes the report; callers decide
/// the exit status from [`Report::passed`].
pub fn diagnose(selector: Selector, seed: u64, report_path: &Path) -> Result<Report, CliError> {
    let report = run_suite(&SuiteConfig::new(selector, seed));
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    dfp::codec::write_atomic(report_path, report.to_text().as_bytes())?;
    Ok(report)
}
