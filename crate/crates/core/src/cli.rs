//! The `train`, `eval`, `bench` and `worker` commands as library calls.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{ConfigError, Mode, RunConfig};
use crate::env::{run_episode, write_trace_csv, EpisodeSummary, TraceRow};
use crate::es::{Fitness, FitnessError, IterationStats, RoutingFitness, StatsWriter};
use crate::policy::{
    init_params, read_checkpoint, unflatten, write_checkpoint, Checkpoint, CheckpointError, NetPolicy, PolicyNet,
    PolicyParams,
};
use crate::rng::{derive_seed, domain, StreamRng};
use crate::runtime::transport::{accept_workers, connect};
use crate::runtime::{run_inproc, run_worker, wall_time_breakdown, Coordinator, RunOutcome, RuntimeError};

pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";
pub const STATS_CSV: &str = "stats.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINAL_EVAL: &str = "final_eval.txt";
pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_HEADER: &str = "n,eval_seconds_per_iter,eval_fraction,speedup_vs_n1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Runtime(#[from] RuntimeError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Other(String),
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// How to start worker processes in multi-process mode.
#[derive(Debug, Clone, Default)]
pub struct Launcher {
    /// Worker executable; defaults to the running binary.
    pub exe: Option<PathBuf>,
}

impl Launcher {
    fn exe(&self) -> Result<PathBuf, CliError> {
        match &self.exe {
            Some(p) => Ok(p.clone()),
            None => std::env::current_exe().map_err(io_ctx("locating worker executable")),
        }
    }
}

/// Which objective the workers evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Routing,
    /// `bench.synthetic_eval_ms` sleep per evaluation when configured,
    /// otherwise routing.
    Bench,
}

/// Fixed-cost stand-in for rollouts: sleeps, then returns 0.
pub struct SleepFitness(pub Duration);

impl Fitness for SleepFitness {
    fn evaluate(&self, _params: &[f64], _t: u64) -> Result<f64, FitnessError> {
        thread::sleep(self.0);
        Ok(0.0)
    }
}

pub type SharedFitness = Arc<dyn Fitness + Send>;

pub fn build_fitness(cfg: &RunConfig, objective: Objective) -> Result<(SharedFitness, Vec<f64>), CliError> {
    let net = PolicyNet::new(cfg.policy).map_err(|e| ConfigError::Invalid { key: "policy", message: e.to_string() })?;
    let theta = init_params(&cfg.policy, cfg.init_seed).values().to_vec();
    if let (Objective::Bench, Some(ms)) = (objective, cfg.bench.synthetic_eval_ms) {
        return Ok((Arc::new(SleepFitness(Duration::from_secs_f64(ms / 1000.0))), theta));
    }
    let fitness = RoutingFitness {
        net,
        envs: cfg.env_configs()?,
        episodes: cfg.es.episodes_per_eval,
        global_seed: cfg.es.global_seed,
    };
    Ok((Arc::new(fitness), theta))
}

fn kill_all(children: &mut [Child]) {
    for c in children.iter_mut() {
        let _ = c.kill();
        let _ = c.wait();
    }
}

/// Runs `cfg.es.iterations` iterations with `cfg.run.workers` lanes in the
/// configured mode. `config_path` is the effective config that spawned
/// workers load.
fn execute<O>(
    cfg: &RunConfig,
    objective: Objective,
    config_path: &Path,
    launcher: &Launcher,
    observer: O,
) -> Result<RunOutcome, CliError>
where
    O: FnMut(&IterationStats, &[f64]) -> Result<(), RuntimeError>,
{
    let (fitness, theta) = build_fitness(cfg, objective)?;
    let n = cfg.run.workers;
    if cfg.run.mode == Mode::InProc || n == 1 {
        return Ok(run_inproc(cfg.es, fitness, theta, n, cfg.timeout(), observer)?);
    }

    let listener = TcpListener::bind(&cfg.run.endpoint).map_err(io_ctx(format!("binding {}", cfg.run.endpoint)))?;
    let addr = listener.local_addr().map_err(io_ctx("reading listen address"))?.to_string();
    let mut children = Vec::new();
    if cfg.run.spawn_workers {
        let exe = launcher.exe()?;
        let mut args = vec!["worker".to_string(), "--config".into(), config_path.display().to_string()];
        args.extend(["--endpoint".into(), addr.clone()]);
        if objective == Objective::Bench {
            args.push("--bench".into());
        }
        for _ in 1..n {
            match Command::new(&exe).args(&args).stdin(Stdio::null()).spawn() {
                Ok(c) => children.push(c),
                Err(e) => {
                    kill_all(&mut children);
                    return Err(io_ctx(format!("spawning worker {}", exe.display()))(e));
                }
            }
        }
    } else {
        eprintln!("coordinator listening on {addr}");
    }
    let result = (|| {
        let conns = accept_workers(&listener, n - 1, cfg.timeout()).map_err(io_ctx("waiting for workers"))?;
        let mut coord = Coordinator::new(cfg.es, fitness, n, cfg.timeout())?;
        for (i, (sink, source)) in conns.into_iter().enumerate() {
            coord.attach(i + 1, Box::new(sink), Box::new(source));
        }
        Ok(coord.run(theta, observer)?)
    })();
    if result.is_err() {
        kill_all(&mut children);
        return result;
    }
    for (i, c) in children.iter_mut().enumerate() {
        let status = c.wait().map_err(io_ctx("waiting for worker process"))?;
        if !status.success() {
            return Err(CliError::Other(format!("worker process {} exited with {status}", i + 1)));
        }
    }
    result
}

fn write_effective_config(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(io_ctx(format!("creating {}", out.display())))?;
    let path = out.join(EFFECTIVE_CONFIG);
    fs::write(&path, cfg.to_text()).map_err(io_ctx(format!("writing {}", path.display())))?;
    Ok(path)
}

fn checkpoint_of(cfg: &RunConfig, theta: &[f64], iterations: u64) -> Result<Checkpoint, CliError> {
    let params = unflatten(Arc::new(cfg.policy.manifest()), theta.to_vec())
        .map_err(|e| CliError::Other(format!("building checkpoint: {e}")))?;
    let metadata = [
        ("iterations", iterations.to_string()),
        ("global_seed", cfg.es.global_seed.to_string()),
        ("init_seed", cfg.init_seed.to_string()),
        ("topology", cfg.env.topologies.join(",")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(Checkpoint { config: cfg.policy, params, metadata })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_mean_return: f64,
    pub wall_seconds: f64,
    pub eval_fraction: f64,
    pub final_checkpoint: PathBuf,
    pub final_eval: EvalReport,
}

impl TrainSummary {
    pub fn line(&self) -> String {
        format!(
            "trained {} iterations: final mean return {:.4}, deterministic eval mean {:.4}, wall {:.1}s, eval_fraction {:.3}, checkpoint {}",
            self.iterations,
            self.final_mean_return,
            self.final_eval.returns.mean,
            self.wall_seconds,
            self.eval_fraction,
            self.final_checkpoint.display()
        )
    }
}

/// Trains a policy and writes the run directory: effective config, stats
/// CSV, periodic and final checkpoints, and an evaluation of the final one.
pub fn cmd_train(cfg: &RunConfig, launcher: &Launcher) -> Result<TrainSummary, CliError> {
    let wall = Instant::now();
    cfg.validate()?;
    let out = cfg.run.out.clone();
    let config_path = write_effective_config(cfg, &out)?;
    let stats_path = out.join(STATS_CSV);
    let file = File::create(&stats_path).map_err(io_ctx(format!("creating {}", stats_path.display())))?;
    let mut stats = StatsWriter::new(BufWriter::new(file)).map_err(io_ctx("writing stats header"))?;
    let interval = cfg.run.checkpoint_interval;
    let ckpt_dir = out.join("checkpoints");

    let outcome = execute(cfg, Objective::Routing, &config_path, launcher, |s, theta| {
        let fail = |e: &dyn std::fmt::Display| RuntimeError::Observer(e.to_string());
        stats.write(s).map_err(|e| fail(&e))?;
        let done = s.t + 1;
        if interval > 0 && done % interval == 0 && done < cfg.es.iterations {
            fs::create_dir_all(&ckpt_dir).map_err(|e| fail(&e))?;
            let ckpt = checkpoint_of(cfg, theta, done).map_err(|e| fail(&e))?;
            write_checkpoint(&ckpt_dir.join(format!("iter_{done:06}.ckpt")), &ckpt).map_err(|e| fail(&e))?;
        }
        Ok(())
    })?;

    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    write_checkpoint(&final_checkpoint, &checkpoint_of(cfg, &outcome.theta, cfg.es.iterations)?)?;
    let final_eval = cmd_eval(cfg, EvalSource::Checkpoint(&final_checkpoint), None)?;
    let eval_path = out.join(FINAL_EVAL);
    fs::write(&eval_path, final_eval.to_text()).map_err(io_ctx(format!("writing {}", eval_path.display())))?;

    Ok(TrainSummary {
        iterations: cfg.es.iterations,
        final_mean_return: outcome.history.last().map_or(f64::NAN, |s| s.mean_return),
        wall_seconds: wall.elapsed().as_secs_f64(),
        eval_fraction: wall_time_breakdown(&outcome.timing).eval_fraction,
        final_checkpoint,
        final_eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    /// Population standard deviation; 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub returns: Moments,
    pub allocated: Moments,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "episodes = {}\nseed = {}\ndeterministic = {}\n",
            self.episodes, self.seed, self.deterministic
        );
        for (name, m) in [("return", &self.returns), ("allocated", &self.allocated)] {
            s += &format!("{name}.mean = {}\n{name}.std = {}\n{name}.min = {}\n{name}.max = {}\n", m.mean, m.std, m.min, m.max);
        }
        s
    }
}

/// Seed of evaluation episode `i`; disjoint from training episode seeds.
pub fn eval_episode_seed(global_seed: u64, i: usize) -> u64 {
    derive_seed(&[domain::EVAL, global_seed, i as u64])
}

pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// The all-zero parameter vector: uniform action probabilities.
    Zero,
}

/// Rolls out a policy over `cfg.run.eval_episodes` fresh seeds, using
/// argmax actions when `policy.deterministic_eval` is set and the noisy
/// sampler otherwise. Episodes cycle through the configured topologies.
pub fn cmd_eval(cfg: &RunConfig, source: EvalSource<'_>, trace: Option<&Path>) -> Result<EvalReport, CliError> {
    cfg.policy.validate().map_err(|e| ConfigError::Invalid { key: "policy", message: e.to_string() })?;
    if cfg.run.eval_episodes == 0 {
        return Err(ConfigError::Invalid { key: "run.eval_episodes", message: "must be positive".into() }.into());
    }
    let params = match source {
        EvalSource::Checkpoint(path) => {
            let ckpt = read_checkpoint(path)?;
            ckpt.ensure_matches(&cfg.policy)?;
            ckpt.params
        }
        EvalSource::Zero => PolicyParams::zeros(Arc::new(cfg.policy.manifest())),
    };
    let net = PolicyNet::new(cfg.policy).map_err(|e| ConfigError::Invalid { key: "policy", message: e.to_string() })?;
    let envs = cfg.env_configs()?;
    let deterministic = cfg.policy.deterministic_eval;
    let mut summaries: Vec<EpisodeSummary> = Vec::with_capacity(cfg.run.eval_episodes);
    let mut rows: Vec<TraceRow> = Vec::new();
    for i in 0..cfg.run.eval_episodes {
        let seed = eval_episode_seed(cfg.es.global_seed, i);
        let rng = StreamRng::new(derive_seed(&[domain::ACTION, seed]));
        let mut policy = NetPolicy::from_params(&net, &params, deterministic, rng);
        let record = (trace.is_some() && i == 0).then_some(&mut rows);
        let s = run_episode(&mut policy, &envs[i % envs.len()], seed, record)
            .map_err(|e| CliError::Other(format!("evaluation episode {i}: {e}")))?;
        summaries.push(s);
    }
    if let Some(path) = trace {
        let f = File::create(path).map_err(io_ctx(format!("creating {}", path.display())))?;
        write_trace_csv(BufWriter::new(f), &rows).map_err(io_ctx(format!("writing {}", path.display())))?;
    }
    let returns: Vec<f64> = summaries.iter().map(|s| s.total_reward).collect();
    let allocated: Vec<f64> = summaries.iter().map(|s| s.allocated).collect();
    Ok(EvalReport {
        episodes: summaries.len(),
        seed: cfg.es.global_seed,
        deterministic,
        returns: Moments::of(&returns),
        allocated: Moments::of(&allocated),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub eval_seconds_per_iter: f64,
    pub eval_fraction: f64,
    pub speedup_vs_n1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Whether evaluation time strictly decreases along increasing `n`.
    pub fn strictly_decreasing(&self) -> bool {
        let mut rows: Vec<&BenchRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.n);
        rows.windows(2).all(|w| w[1].eval_seconds_per_iter < w[0].eval_seconds_per_iter)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{:.6},{:.6},{}\n", r.n, r.eval_seconds_per_iter, r.eval_fraction, r.speedup_vs_n1);
        }
        s
    }
}

/// Times `bench.iterations` iterations for every worker count in
/// `bench.workers` at the fixed mutation budget `es.num_mutations`.
pub fn cmd_bench(cfg: &RunConfig, launcher: &Launcher) -> Result<BenchReport, CliError> {
    if !cfg.bench.workers.contains(&1) {
        return Err(ConfigError::Invalid { key: "bench.workers", message: "must include 1 (the speedup reference)".into() }.into());
    }
    if cfg.bench.iterations == 0 {
        return Err(ConfigError::Invalid { key: "bench.iterations", message: "must be positive".into() }.into());
    }
    let mut measured = Vec::new();
    for &n in &cfg.bench.workers {
        let mut c = cfg.clone();
        c.run.workers = n;
        c.es.iterations = cfg.bench.iterations;
        c.validate()?;
        let dir = cfg.run.out.join(format!("bench_n{n}"));
        let config_path = write_effective_config(&c, &dir)?;
        let outcome = execute(&c, Objective::Bench, &config_path, launcher, |_, _| Ok(()))?;
        let per_iter = outcome.history.iter().map(|s| s.eval_seconds).sum::<f64>() / outcome.history.len() as f64;
        measured.push((n, per_iter, wall_time_breakdown(&outcome.timing).eval_fraction));
    }
    let base = measured.iter().find(|m| m.0 == 1).map(|m| m.1).unwrap_or(f64::NAN);
    let rows = measured
        .into_iter()
        .map(|(n, e, f)| BenchRow { n, eval_seconds_per_iter: e, eval_fraction: f, speedup_vs_n1: base / e })
        .collect();
    let report = BenchReport { rows };
    let path = cfg.run.out.join(BENCH_CSV);
    fs::write(&path, report.to_csv()).map_err(io_ctx(format!("writing {}", path.display())))?;
    Ok(report)
}

/// Joins a multi-process run at `endpoint` and serves until shutdown.
pub fn cmd_worker(cfg: &RunConfig, endpoint: &str, objective: Objective) -> Result<u64, CliError> {
    cfg.validate()?;
    let (fitness, theta) = build_fitness(cfg, objective)?;
    let link = connect(endpoint, cfg.timeout()).map_err(io_ctx(format!("connecting to {endpoint}")))?;
    Ok(run_worker(cfg.es, &*fitness, theta, link)?.iterations)
}

/// Prints `line` and flushes, ignoring a closed stdout.
pub fn say(line: &str) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
