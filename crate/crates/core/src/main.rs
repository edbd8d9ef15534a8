use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use esotn::cli::{self, say, CliError, EvalSource, Launcher, Objective};
use esotn::config::RunConfig;

#[derive(Parser)]
#[command(name = "esotn", version, about = "Distributed evolution strategies for OTN routing policies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a routing policy.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint (or the all-zero policy) on fresh episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "zero")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the all-zero parameter vector (uniform action probabilities).
        #[arg(long, conflicts_with = "checkpoint")]
        zero: bool,
        #[arg(long)]
        episodes: Option<usize>,
        /// Write the step trace of the first episode as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Measure evaluation time per iteration across worker counts.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts, e.g. 1,2,4,8.
        #[arg(long)]
        worker_counts: Option<String>,
        #[arg(long)]
        bench_iterations: Option<u64>,
        /// Replace rollouts with a fixed sleep of this many milliseconds.
        #[arg(long)]
        synthetic_eval_ms: Option<f64>,
    },
    /// Join a multi-process run.
    Worker {
        #[command(flatten)]
        common: Common,
        /// Serve the benchmark objective instead of training rollouts.
        #[arg(long)]
        bench: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["inproc", "proc"])]
    mode: Option<String>,
    /// Global seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iter_timeout_secs: Option<f64>,
    /// Coordinator address (host:port).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    k_paths: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    num_mutations: Option<usize>,
    #[arg(long)]
    episodes_per_eval: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Any config key, e.g. `--set es.mirrored=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig, CliError> {
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Other(format!("--set expects KEY=VALUE, got {s:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("run.workers", self.workers.map(|v| v.to_string())),
            ("run.mode", self.mode.clone()),
            ("es.global_seed", self.seed.map(|v| v.to_string())),
            ("run.out", self.out.as_ref().map(|p| p.display().to_string())),
            ("run.iter_timeout_secs", self.iter_timeout_secs.map(|v| v.to_string())),
            ("run.endpoint", self.endpoint.clone()),
            ("env.topology", self.topology.clone()),
            ("env.k_paths", self.k_paths.map(|v| v.to_string())),
            ("policy.hidden_dim", self.hidden_dim.map(|v| v.to_string())),
            ("es.alpha", self.alpha.map(|v| v.to_string())),
            ("es.sigma", self.sigma.map(|v| v.to_string())),
            ("es.num_mutations", self.num_mutations.map(|v| v.to_string())),
            ("es.episodes_per_eval", self.episodes_per_eval.map(|v| v.to_string())),
            ("es.iterations", self.iterations.map(|v| v.to_string())),
        ];
        for (k, v) in flags.into_iter().chain(extra) {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let launcher = Launcher::default();
    match cli.command {
        Cmd::Train { common } => {
            let cfg = common.load(vec![])?;
            say(&cli::cmd_train(&cfg, &launcher)?.line());
        }
        Cmd::Eval { common, checkpoint, zero: _, episodes, trace } => {
            let cfg = common.load(vec![("run.eval_episodes", episodes.map(|v| v.to_string()))])?;
            let source = match &checkpoint {
                Some(p) => EvalSource::Checkpoint(p),
                None => EvalSource::Zero,
            };
            print!("{}", cli::cmd_eval(&cfg, source, trace.as_deref())?.to_text());
        }
        Cmd::Bench { common, worker_counts, bench_iterations, synthetic_eval_ms } => {
            let cfg = common.load(vec![
                ("bench.workers", worker_counts),
                ("bench.iterations", bench_iterations.map(|v| v.to_string())),
                ("bench.synthetic_eval_ms", synthetic_eval_ms.map(|v| v.to_string())),
            ])?;
            let report = cli::cmd_bench(&cfg, &launcher)?;
            print!("{}", report.to_csv());
            say(&format!(
                "eval time strictly decreasing in n: {}",
                if report.strictly_decreasing() { "yes" } else { "no" }
            ));
        }
        Cmd::Worker { common, bench } => {
            let cfg = common.load(vec![])?;
            let endpoint = cfg.run.endpoint.clone();
            let objective = if bench { Objective::Bench } else { Objective::Routing };
            cli::cmd_worker(&cfg, &endpoint, objective)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("esotn: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
