//! Suites that exercise the command layer itself.

use std::path::Path;

use discdiff::config::RunConfig;
use discdiff::net::ScoreNet;
use discdiff::train::{checkpoint_path, parse_states, TrainLog};
use discdiff::verify::{smoke_config, Check};
use discdiff::Error;

use crate::{cmd_sample, cmd_train, exit_code};

pub const CLI_SUITES: &[&str] = &["cli.determinism", "cli.exit_codes", "cli.round_trip"];

pub fn run(name: &str) -> Option<Check> {
    let r = match name {
        "cli.determinism" => determinism(),
        "cli.exit_codes" => exit_codes(),
        "cli.round_trip" => round_trip(),
        _ => return None,
    };
    Some(r.unwrap_or_else(|e| Err(format!("error: {e}"))))
}

fn small_config() -> RunConfig {
    let mut cfg = smoke_config();
    cfg.epochs = 3;
    cfg.n_k = 1000;
    cfg.batch = 250;
    cfg
}

fn files(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        out.push((path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path)?));
    }
    out.sort();
    Ok(out)
}

fn determinism() -> discdiff::Result<Check> {
    let cfg = small_config();
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_train(&cfg, &a)?;
    cmd_train(&cfg, &b)?;
    let (sa, sb) = (tmp.path().join("sa"), tmp.path().join("sb"));
    cmd_sample(&a, &sa, 2000, 5)?;
    cmd_sample(&b, &sb, 2000, 5)?;
    let trained_same = files(&a)? == files(&b)?;
    let sampled_same = files(&sa)? == files(&sb)?;
    Ok(if trained_same && sampled_same {
        Ok("train and sample outputs byte-identical across reruns".into())
    } else {
        Err(format!("train identical: {trained_same}, sample identical: {sampled_same}"))
    })
}

fn exit_codes() -> discdiff::Result<Check> {
    let bad_key = RunConfig::from_text("bogus = 1").unwrap_err();
    let cases = [
        (bad_key, 2),
        (Error::Config("x".into()), 2),
        (
            Error::NumericAbort {
                epoch: 0,
                interval: 0,
                batch: 0,
                what: "loss is NaN".into(),
            },
            3,
        ),
        (Error::Checkpoint("x".into()), 4),
        (Error::OracleCap { states: 1 << 30, cap: 1 << 20 }, 5),
    ];
    let wrong: Vec<String> = cases
        .iter()
        .filter(|(e, code)| exit_code(e) != *code)
        .map(|(e, code)| format!("{e} -> {} (want {code})", exit_code(e)))
        .collect();
    Ok(if wrong.is_empty() {
        Ok(format!("{} error kinds mapped to their codes", cases.len()))
    } else {
        Err(wrong.join("; "))
    })
}

fn round_trip() -> discdiff::Result<Check> {
    let cfg = small_config();
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    cmd_train(&cfg, dir)?;
    cmd_sample(dir, &dir.join("s"), 100, 1)?;
    let space = cfg.space()?;
    let mut bad = Vec::new();

    let text = std::fs::read_to_string(dir.join("dataset.txt"))?;
    let states = parse_states(space, &text)?;
    if discdiff::train::Dataset::from_states(space, &states, discdiff::train::Provenance::Analytic)?.to_text() != text {
        bad.push("dataset");
    }
    let samples = std::fs::read_to_string(dir.join("s/samples.txt"))?;
    if parse_states(space, &samples)?.len() != 100 {
        bad.push("samples");
    }
    let path = checkpoint_path(dir, 0);
    let net = ScoreNet::read_checkpoint(&path)?;
    let again = dir.join("again.ckpt");
    net.write_checkpoint(&again)?;
    if std::fs::read(&path)? != std::fs::read(&again)? {
        bad.push("checkpoint");
    }
    let log = std::fs::read_to_string(dir.join("train_log.csv"))?;
    if TrainLog::parse_csv(&log)?.to_csv() != log {
        bad.push("training log");
    }
    let conf = std::fs::read_to_string(dir.join("config.txt"))?;
    if RunConfig::from_text(&conf)? != cfg {
        bad.push("config");
    }
    Ok(if bad.is_empty() {
        Ok("dataset, samples, checkpoint, log and config re-parse".into())
    } else {
        Err(format!("round trip broken for {}", bad.join(", ")))
    })
}
