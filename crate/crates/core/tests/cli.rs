use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use esotn::cli::{cmd_eval, EvalSource};
use esotn::config::RunConfig;
use esotn::env::{episode_return, EnvConfig, EnvError, EnvState};
use esotn::rng::{derive_seed, domain, StreamRng};

const BIN: &str = env!("CARGO_BIN_EXE_esotn");

fn esotn(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("running esotn")
}

fn ok(args: &[&str]) -> String {
    let out = esotn(args);
    assert!(out.status.success(), "esotn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TRIANGLE: [&str; 4] = ["--topology", "triangle", "--set", "env.demand_bandwidths=4"];

fn triangle_train(out: &Path, extra: &[&str]) -> String {
    let out = out.to_str().unwrap();
    let mut args = vec!["train", "--iterations", "2", "--num-mutations", "4", "--out", out];
    args.extend(TRIANGLE);
    args.extend(extra);
    ok(&args)
}

#[test]
fn triangle_smoke_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let summary = triangle_train(dir.path(), &[]);
    assert!(summary.starts_with("trained 2 iterations"), "{summary}");
    let csv = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,best_return,mean_return,worst_return,eval_seconds,update_seconds,theta_l2_norm");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    for f in ["effective_config.txt", "final.ckpt", "final.ckpt.meta", "final_eval.txt"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let echo = RunConfig::from_text(&fs::read_to_string(dir.path().join("effective_config.txt")).unwrap()).unwrap();
    assert_eq!(echo.es.iterations, 2);
    assert_eq!(echo.env.topologies, vec!["triangle"]);
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    triangle_train(a.path(), &["--seed", "9"]);
    triangle_train(b.path(), &["--seed", "9"]);
    triangle_train(c.path(), &["--seed", "10"]);
    let read = |d: &Path| fs::read(d.join("final.ckpt")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(fs::read(a.path().join("final.ckpt.meta")).unwrap(), fs::read(b.path().join("final.ckpt.meta")).unwrap());
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--iterations", "5", "--num-mutations", "4", "--out", dir.path().to_str().unwrap()];
    args.extend(TRIANGLE);
    args.extend(["--set", "run.checkpoint_interval=2"]);
    ok(&args);
    let mut names: Vec<String> = fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["iter_000002.ckpt", "iter_000002.ckpt.meta", "iter_000004.ckpt", "iter_000004.ckpt.meta"]);
}

#[test]
fn errors_are_single_line_and_nonzero() {
    let out = esotn(&["train", "--set", "es.sgima=0.1"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("es.sgima"));

    let out = esotn(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let out = esotn(&["train", "--workers", "40", "--out", dir.path().to_str().unwrap()]);
    assert!(String::from_utf8(out.stderr).unwrap().contains("run.workers"));
}

#[test]
fn eval_reproduces_logged_numbers() {
    let dir = tempfile::tempdir().unwrap();
    triangle_train(dir.path(), &[]);
    let ckpt = dir.path().join("final.ckpt");
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(TRIANGLE);
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert_eq!(first, fs::read_to_string(dir.path().join("final_eval.txt")).unwrap());
}

#[test]
fn single_episode_has_zero_std() {
    let mut args = vec!["eval", "--zero", "--episodes", "1"];
    args.extend(TRIANGLE);
    let text = ok(&args);
    assert!(text.contains("episodes = 1\n"));
    assert!(text.contains("return.std = 0\n") && text.contains("allocated.std = 0\n"), "{text}");
}

fn triangle_config(deterministic: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [("env.topology", "triangle"), ("env.demand_bandwidths", "4,8"), ("env.k_paths", "2"), ("run.eval_episodes", "40")] {
        cfg.set(k, v).unwrap();
    }
    cfg.policy.deterministic_eval = deterministic;
    cfg.es.global_seed = 3;
    cfg
}

/// Zero parameters on the triangle: the sampled policy is uniform over the
/// two candidates, the argmax policy always takes the direct link.
#[test]
fn zero_policy_matches_hand_simulated_agents() {
    for deterministic in [false, true] {
        let cfg = triangle_config(deterministic);
        let report = cmd_eval(&cfg, EvalSource::Zero, None).unwrap();
        let env: EnvConfig = cfg.env_configs().unwrap().remove(0);
        let mut total = 0.0;
        for i in 0..40u64 {
            let seed = derive_seed(&[domain::EVAL, 3, i]);
            let mut rng = StreamRng::new(derive_seed(&[domain::ACTION, seed]));
            let mut agent = |_: &EnvConfig, _: &EnvState| -> Result<usize, EnvError> {
                if deterministic {
                    Ok(0)
                } else {
                    // Two equiprobable actions under the 5% uniform mixture.
                    let half = 0.95 * 0.5 + 0.05 / 2.0;
                    Ok(usize::from(rng.next_f64() >= half))
                }
            };
            total += episode_return(&mut agent, &env, seed).unwrap();
        }
        assert!((report.returns.mean - total / 40.0).abs() < 1e-12, "deterministic={deterministic}");
    }
}

#[test]
fn trace_csv_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let mut args = vec!["eval", "--zero", "--episodes", "2", "--trace", trace.to_str().unwrap()];
    args.extend(TRIANGLE);
    ok(&args);
    let text = fs::read_to_string(trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,src,dst,bandwidth,action,reward,done"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.last().unwrap().ends_with(",true"));
}

#[test]
fn multi_process_matches_in_process() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let common = ["--iterations", "2", "--num-mutations", "8", "--hidden-dim", "4", "--set", "es.episodes_per_eval=1"];
    let run = |dir: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--out", dir.to_str().unwrap()];
        args.extend(common);
        args.extend(extra);
        ok(&args);
        fs::read(dir.join("final.ckpt")).unwrap()
    };
    assert_eq!(run(a.path(), &["--workers", "1"]), run(b.path(), &["--workers", "3", "--mode", "proc"]));
}

#[test]
fn mixed_topology_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "train", "--out", dir.path().to_str().unwrap(), "--topology", "nsfnet,geant2", "--iterations", "1",
        "--num-mutations", "2", "--hidden-dim", "4", "--set", "es.episodes_per_eval=2", "--set", "run.eval_episodes=4",
    ]);
    assert!(out.contains("trained 1 iterations"));
}

#[test]
fn bench_with_synthetic_evaluator() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "bench", "--out", dir.path().to_str().unwrap(), "--worker-counts", "1,2,4", "--bench-iterations", "2",
        "--synthetic-eval-ms", "25", "--num-mutations", "8",
    ]);
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(out.starts_with(&csv));
    let rows: Vec<Vec<f64>> =
        csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(csv.lines().next(), Some("n,eval_seconds_per_iter,eval_fraction,speedup_vs_n1"));
    assert_eq!(rows[0][3], 1.0);
    for (row, ideal) in rows.iter().zip([1.0, 2.0, 4.0]) {
        assert!((row[3] - ideal).abs() <= 0.15 * ideal, "speedup {row:?} vs {ideal}");
        // speedup column is definitional
        assert!((row[3] - rows[0][1] / row[1]).abs() < 1e-3 * row[3]);
    }
}

#[test]
fn missing_workers_time_out() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = esotn(&[
        "train", "--out", dir.path().to_str().unwrap(), "--mode", "proc", "--workers", "2", "--num-mutations", "4",
        "--iter-timeout-secs", "1", "--set", "run.spawn_workers=false",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("only 0 of 1 workers connected"));
    assert!(started.elapsed() < Duration::from_secs(20));
}

/// Coordinator plus two externally started workers; one worker process is
/// killed mid-run and the coordinator must name it.
#[test]
fn killed_worker_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut coord = Command::new(BIN)
        .args([
            "train", "--out", dir.path().to_str().unwrap(), "--mode", "proc", "--workers", "3", "--iterations", "200",
            "--num-mutations", "12", "--iter-timeout-secs", "30", "--set", "run.spawn_workers=false",
        ])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(coord.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("coordinator listening on ").expect(&line).to_string();
    let worker = || {
        Command::new(BIN)
            .args(["worker", "--endpoint", &addr, "--num-mutations", "12", "--workers", "3"])
            .stderr(Stdio::null())
            .spawn()
            .unwrap()
    };
    let mut first = worker();
    std::thread::sleep(Duration::from_millis(500));
    let mut second = worker();

    let stats = dir.path().join("stats.csv");
    let deadline = Instant::now() + Duration::from_secs(60);
    while fs::read_to_string(&stats).map_or(true, |s| s.lines().count() < 2) {
        assert!(Instant::now() < deadline, "training never started");
        std::thread::sleep(Duration::from_millis(20));
    }
    second.kill().unwrap();
    second.wait().unwrap();

    let status = coord.wait().unwrap();
    let mut rest = String::new();
    std::io::Read::read_to_string(&mut stderr, &mut rest).unwrap();
    let _ = first.kill();
    let _ = first.wait();
    assert!(!status.success());
    assert!(rest.contains("worker 2"), "{rest}");
    assert!(rest.contains("iteration"), "{rest}");
}
