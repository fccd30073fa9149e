use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfp::oracle::Selector;
use dfp_cli::commands::{self, Axis};
use dfp_cli::config::{resolve_output, RunConfig, RunPhase};
use dfp_cli::CliError;

#[derive(Parser)]
#[command(name = "dfp", version, about = "Drifting field policy: train, evaluate and verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted demonstrator and write an offline dataset.
    GenerateData(RunArgs),
    /// Run the configured training phases.
    Train(RunArgs),
    /// Evaluate a checkpoint with best-of-N' acting.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to the final checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the top-K weight or the number of positives across seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Skip the BC-only reference runs.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Run the closed-form verifier suite.
    Diagnose {
        #[arg(long, default_value = "all", value_parser = parse_selector)]
        suite: Selector,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path, relative to the output root; defaults to
        /// `diagnose_<suite>_<seed>.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    ShowConfig(RunArgs),
}

/// Configuration sources, applied in order: file, `--set`, then the
/// shorthand flags.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, repeatable; any config field.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    env_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_phase)]
    phase: Option<RunPhase>,
    #[arg(long)]
    offline_steps: Option<usize>,
    #[arg(long)]
    online_steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k_positives: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut o = self.set.clone();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
        put("run.env_id", self.env_id.as_deref().map(quote));
        put("run.seed", self.seed.map(|v| v.to_string()));
        put(
            "run.phase",
            self.phase.map(|p| quote(match p {
                RunPhase::Offline => "offline",
                RunPhase::Online => "online",
                RunPhase::OfflineToOnline => "offline_to_online",
            })),
        );
        put("run.offline_steps", self.offline_steps.map(|v| v.to_string()));
        put("run.online_steps", self.online_steps.map(|v| v.to_string()));
        put("run.output_dir", self.output_dir.as_ref().map(|p| quote(&p.to_string_lossy())));
        put("run.dataset", self.dataset.as_ref().map(|p| quote(&p.to_string_lossy())));
        put("data.episodes", self.episodes.map(|v| v.to_string()));
        put("data.noise_scale", self.noise_scale.map(|v| format!("{v:?}")));
        put("eval.interval", self.eval_interval.map(|v| v.to_string()));
        put("eval.episodes", self.eval_episodes.map(|v| v.to_string()));
        put("loss.lambda", self.lambda.map(|v| format!("{v:?}")));
        put("loss.k_positives", self.k_positives.map(|v| v.to_string()));
        RunConfig::load(self.config.as_deref(), &o)
    }
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_selector(s: &str) -> Result<Selector, String> {
    s.parse().map_err(|e: dfp::Error| e.to_string())
}

fn parse_phase(s: &str) -> Result<RunPhase, String> {
    match s {
        "offline" => Ok(RunPhase::Offline),
        "online" => Ok(RunPhase::Online),
        "offline_to_online" => Ok(RunPhase::OfflineToOnline),
        other => Err(format!("unknown phase `{other}`")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(args) => {
            let s = commands::generate_data(&args.resolve()?)?;
            println!("dataset = {}", s.path.display());
            print!("{}", s.manifest.to_text());
        }
        Command::Train(args) => {
            let s = commands::train(&args.resolve()?)?;
            println!("metrics = {}", s.metrics.display());
            println!("checkpoint = {}", s.checkpoint.display());
            if let Some(r) = s.final_eval_return() {
                println!("final_eval_return = {r}");
            }
            println!("actions_generated = {}", s.actions_generated);
            println!("policy_forward_calls = {}", s.policy_forward_calls);
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir().join(commands::FINAL_CHECKPOINT));
            let report = commands::eval(&cfg, &ckpt)?;
            print!("{}", report.to_key_values().to_text());
        }
        Command::Ablate {
            run,
            axis,
            values,
            seeds,
            no_baseline,
        } => {
            let s = commands::ablate(&run.resolve()?, axis, &values, &seeds, !no_baseline)?;
            print!("{}", s.to_csv());
            println!("table = {}", s.table.display());
        }
        Command::Diagnose { suite, seed, report } => {
            let name = Selector::NAMES
                .iter()
                .find(|n| n.parse::<Selector>().ok() == Some(suite))
                .copied()
                .unwrap_or("all");
            let path = resolve_output(
                &report.unwrap_or_else(|| PathBuf::from(format!("diagnose_{name}_{seed}.txt"))),
            );
            let r = commands::diagnose(suite, seed, &path)?;
            print!("{}", r.to_text());
            println!("report = {}", path.display());
            if !r.passed() {
                return Err(CliError::Failed(format!(
                    "failed checks: {}",
                    r.failures().join(", ")
                )));
            }
        }
        Command::ShowConfig(args) => {
            let cfg = args.resolve()?;
            print!("{}", cfg.to_toml());
            let problems = cfg.problems();
            if !problems.is_empty() {
                return Err(CliError::config(problems));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dfp: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
