use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use discdiff::config::RunConfig;
use discdiff::diagnostics::{
    discretization_gap, error_terms, error_terms_csv, hardness_pair, hardness_table_csv, kl, summarize_sweep,
    sweep, sweep_csv, truncation_error, two_column,
};
use discdiff::net::ScoreNet;
use discdiff::sampler::{exact_reverse_marginal, sample_reverse, JumpTrace, SamplerConfig};
use discdiff::score::ScoreModel;
use discdiff::train::{draw_dataset, read_checkpoints, states_to_text, train, write_checkpoints, Dataset};
use discdiff::verify::{self, SuiteResult, VerifyOptions};
use discdiff::Error;

mod suites;

#[derive(Parser)]
#[command(name = "discdiff", version, about = "Discrete-state score diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one score network per interval and write checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed_train`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from trained checkpoints.
    Sample {
        /// Directory holding `net_*.ckpt`.
        checkpoints: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `samples`.
        #[arg(long)]
        count: Option<usize>,
        /// Overrides `seed_sample`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact metrics of trained checkpoints against the analytic `p0`.
    Evaluate {
        checkpoints: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over the `sweep_n_k` x `sweep_seeds` grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of logical cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the property suites and print a pass/fail table.
    Verify {
        /// Clip bound used by the clipping suite.
        #[arg(long)]
        clip: Option<f64>,
        /// Run only the named suites. Repeatable.
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// List suite names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Two-point hardness table.
    Hardness {
        /// Comma-separated epsilons; defaults to a log grid on (1e-4, 0.039].
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericAbort { .. } | Error::RateBound { .. } | Error::PoissonGuard { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::OracleCap { .. } => 5,
        _ => 2,
    }
}

/// Parse `args` (program name first) and run the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Verify(msg)) => {
            eprintln!("{msg}");
            1
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            if matches!(e, Error::OracleCap { .. }) {
                eprintln!("hint: the state space is too large to enumerate; evaluate from samples instead");
            }
            exit_code(&e)
        }
    }
}

/// Every registered suite, library and CLI, with default options.
pub fn verify_all() -> Vec<SuiteResult> {
    run_suites(&VerifyOptions::default(), &[]).expect("no filter")
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train { cfg, out, seed } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(s) = seed {
                cfg.seed_train = s;
            }
            let summary = cmd_train(&cfg, &out)?;
            println!("{summary}");
        }
        Command::Sample {
            checkpoints,
            cfg,
            out,
            count,
            seed,
        } => {
            let cfg = load_config(&cfg)?;
            let n = cmd_sample(&checkpoints, &out, count.unwrap_or(cfg.samples), seed.unwrap_or(cfg.seed_sample))?;
            println!("wrote {n} samples to {}", out.join("samples.txt").display());
        }
        Command::Evaluate { checkpoints, cfg, out } => {
            let cfg = load_config(&cfg)?;
            let metrics = cmd_evaluate(&checkpoints, &cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("json"));
            let bad = metrics["error_terms"]
                .as_array()
                .map(|a| a.iter().any(|t| !t["violations"].as_array().is_none_or(|v| v.is_empty())))
                .unwrap_or(false);
            if bad {
                return Err(Failure::Verify("error-term inequalities violated".into()));
            }
        }
        Command::Sweep { cfg, out, jobs } => {
            let cfg = load_config(&cfg)?;
            let jobs = jobs
                .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
                .unwrap_or(1);
            cmd_sweep(&cfg, &out, jobs)?;
        }
        Command::Verify { clip, suites, list } => {
            if list {
                for name in verify::SUITES.iter().chain(suites::CLI_SUITES) {
                    println!("{name}");
                }
                return Ok(());
            }
            let opts = VerifyOptions { clip_override: clip };
            let results = run_suites(&opts, &suites)?;
            print!("{}", verify::report(&results));
            if results.iter().any(|r| !r.passed) {
                return Err(Failure::Verify("one or more suites failed".into()));
            }
        }
        Command::Hardness { eps, out } => {
            let grid = if eps.is_empty() { default_eps_grid() } else { eps };
            let rows = grid.iter().map(|&e| hardness_pair(e)).collect::<discdiff::Result<Vec<_>>>()?;
            let csv = hardness_table_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("hardness.csv"), &csv)?;
            }
        }
    }
    Ok(())
}

pub fn default_eps_grid() -> Vec<f64> {
    let (lo, hi, n) = (1e-4f64, 0.039f64, 40);
    (1..=n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / n as f64).exp())
        .collect()
}

fn load_config(args: &ConfigArgs) -> discdiff::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset from the `dataset` file, else drawn from `p0`.
fn load_dataset(cfg: &RunConfig) -> discdiff::Result<(Dataset, Option<discdiff::state::DistTable>)> {
    let space = cfg.space()?;
    let p0 = cfg.p0.as_ref().map(|p| p.resolve(space)).transpose()?;
    let data = match (&cfg.dataset, &p0) {
        (Some(path), _) => Dataset::read(space, path)?,
        (None, Some(p0)) => draw_dataset(p0, cfg.dataset_size(), &mut ChaCha8Rng::seed_from_u64(cfg.seed_dataset))?,
        (None, None) => {
            return Err(Error::Config(
                "key `dataset` is missing (give a dataset file or an analytic `p0`)".into(),
            ))
        }
    };
    Ok((data, p0))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> discdiff::Result<String> {
    let (data, p0) = load_dataset(cfg)?;
    let trained = train(&data, cfg, p0.as_ref())?;
    std::fs::create_dir_all(out)?;
    write_checkpoints(out, &trained.nets)?;
    std::fs::write(out.join("train_log.csv"), trained.log.to_csv())?;
    data.write(&out.join("dataset.txt"))?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(format!(
        "trained {} intervals, {} updates, B = {}, C = {}",
        trained.nets.len(),
        trained.log.rows.len(),
        trained.score_bound,
        trained.clip
    ))
}

/// Sampler settings implied by a consistent checkpoint set.
fn sampler_config(nets: &[ScoreNet], seed: u64) -> discdiff::Result<SamplerConfig> {
    let k_total = nets.len();
    let t0 = nets[0].meta().query_time;
    let step = if k_total > 1 {
        (nets[k_total - 1].meta().query_time - t0) / (k_total - 1) as f64
    } else {
        t0
    };
    for (k, net) in nets.iter().enumerate() {
        let expect = t0 + k as f64 * step;
        if (net.meta().query_time - expect).abs() > 1e-9 * expect.max(1.0) {
            return Err(Error::Checkpoint(format!("checkpoint {k} query time is off the grid")));
        }
    }
    let delta = (t0 - step).max(0.0);
    SamplerConfig::new(k_total, step, delta, seed)
}

pub fn cmd_sample(dir: &Path, out: &Path, count: usize, seed: u64) -> discdiff::Result<usize> {
    let nets = read_checkpoints(dir)?;
    let space = nets[0].space();
    let scfg = sampler_config(&nets, seed)?;
    let mut trace = JumpTrace::default();
    let flat = sample_reverse(&nets, space, &scfg, count, Some(&mut trace))?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("samples.txt"), states_to_text(&flat, space.dims()))?;
    std::fs::write(out.join("jump_trace.csv"), trace.to_csv())?;
    Ok(count)
}

pub fn cmd_evaluate(dir: &Path, cfg: &RunConfig, out: &Path) -> discdiff::Result<serde_json::Value> {
    let nets = read_checkpoints(dir)?;
    let space = nets[0].space();
    if space != cfg.space()? {
        return Err(Error::Checkpoint("checkpoint state space disagrees with keys `S`/`d`".into()));
    }
    let p0 = cfg
        .p0
        .as_ref()
        .ok_or_else(|| Error::Config("key `p0` is required for evaluation".into()))?
        .resolve(space)?;
    space.n_states()?;
    if nets.len() != cfg.intervals {
        return Err(Error::Checkpoint(format!("{} checkpoints but K = {}", nets.len(), cfg.intervals)));
    }
    for (k, net) in nets.iter().enumerate() {
        if (net.meta().query_time - cfg.query_time(k)).abs() > 1e-9 {
            return Err(Error::Checkpoint(format!(
                "checkpoint {k} was trained for t' = {}, config gives {}",
                net.meta().query_time,
                cfg.query_time(k)
            )));
        }
    }
    let scfg = SamplerConfig::new(cfg.intervals, cfg.step, cfg.delta, cfg.seed_sample)?;
    let law = exact_reverse_marginal(&nets, space, &scfg)?;
    let divergence = kl(&p0, &law)?;
    let terms = nets.iter().map(|n| error_terms(&p0, n)).collect::<discdiff::Result<Vec<_>>>()?;
    let (trunc, trunc_bound) = truncation_error(&p0, cfg.horizon)?;
    let clip = nets[0].clip_bound().unwrap_or(nets[0].clip());
    let gap = discretization_gap(&p0, &nets, cfg.step, cfg.delta, clip)?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("error_terms.csv"), error_terms_csv(&terms))?;
    let ks: Vec<f64> = (0..terms.len()).map(|k| k as f64).collect();
    std::fs::write(
        out.join("score_error.dat"),
        two_column(&ks, &terms.iter().map(|t| t.a).collect::<Vec<_>>()),
    )?;
    let metrics = json!({
        "kl": divergence,
        "horizon": cfg.horizon,
        "clip": clip,
        "truncation": { "kl": trunc, "bound": trunc_bound },
        "discretization": {
            "continuous": gap.continuous,
            "discrete": gap.discrete,
            "gap": gap.gap,
            "bound": gap.bound,
        },
        "error_terms": terms.iter().enumerate().map(|(k, t)| json!({
            "k": k, "A": t.a, "B": t.b, "C": t.c, "violations": t.violations(),
        })).collect::<Vec<_>>(),
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics).expect("json"))?;
    Ok(metrics)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> discdiff::Result<()> {
    let space = cfg.space()?;
    let p0 = cfg
        .p0
        .as_ref()
        .ok_or_else(|| Error::Config("key `p0` is required for a sweep".into()))?
        .resolve(space)?;
    let rows = sweep(cfg, &p0, &cfg.sweep_n_k, &cfg.sweep_seeds, jobs)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    let logn: Vec<f64> = rows.iter().map(|r| (r.n_k as f64).ln()).collect();
    let loge: Vec<f64> = rows.iter().map(|r| r.mean_score_err.ln()).collect();
    std::fs::write(out.join("score_error_vs_n.dat"), two_column(&logn, &loge))?;
    let mut summary = json!({ "cells": rows.len() });
    if rows.iter().map(|r| r.n_k).collect::<std::collections::BTreeSet<_>>().len() >= 2 {
        let s = summarize_sweep(&rows)?;
        let (lo, hi) = s.fit.slope_ci();
        let nf: Vec<f64> = s.n_values.iter().map(|&n| n as f64).collect();
        std::fs::write(out.join("kl_vs_n.dat"), two_column(&nf, &s.median_kl))?;
        println!(
            "slope {:.4} (95% CI [{lo:.4}, {hi:.4}]), spearman(KL) {:.3}, KL strictly decreasing: {}",
            s.fit.slope, s.spearman_kl, s.kl_strictly_decreasing
        );
        summary = json!({
            "cells": rows.len(),
            "slope": s.fit.slope,
            "slope_ci": [lo, hi],
            "n_values": s.n_values,
            "median_kl": s.median_kl,
            "median_score_err": s.median_err,
            "spearman_kl": s.spearman_kl,
            "kl_strictly_decreasing": s.kl_strictly_decreasing,
        });
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn run_suites(opts: &VerifyOptions, filter: &[String]) -> Result<Vec<SuiteResult>, Failure> {
    let all: Vec<&'static str> = verify::SUITES.iter().chain(suites::CLI_SUITES).copied().collect();
    for name in filter {
        if !all.contains(&name.as_str()) {
            return Err(Failure::Lib(Error::Config(format!(
                "unknown suite `{name}`; known suites: {}",
                all.join(", ")
            ))));
        }
    }
    let selected = all.into_iter().filter(|n| filter.is_empty() || filter.iter().any(|f| f == n));
    Ok(selected
        .map(|name| {
            let start = std::time::Instant::now();
            let check = verify::run_suite(name, opts).or_else(|| suites::run(name)).expect("registered");
            let (passed, detail) = match check {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult {
                name,
                passed,
                detail,
                millis: start.elapsed().as_millis(),
            }
        })
        .collect())
}
