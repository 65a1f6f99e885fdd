use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use discdiff::config::RunConfig;
use discdiff::interp::realize_table;
use discdiff::net::NetMeta;
use discdiff::score::{true_score, ScoreTable};
use discdiff::state::StateSpace;
use discdiff::train::{checkpoint_path, parse_states, write_checkpoints, TrainLog};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_discdiff"))
}

fn smoke_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Networks that reproduce the given tables exactly, written as checkpoints.
fn write_table_checkpoints(dir: &Path, tables: &[ScoreTable], h: f64, clip: f64) {
    let nets: Vec<_> = tables
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let meta = NetMeta {
                interval: k,
                n_intervals: tables.len(),
                query_time: (k + 1) as f64 * h,
                seed: k as u64,
            };
            realize_table(t, 16, clip, meta).unwrap()
        })
        .collect();
    write_checkpoints(dir, &nets).unwrap();
}

#[test]
fn train_smoke_writes_checkpoints_and_full_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", s(&smoke_conf()), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..5 {
        assert!(checkpoint_path(&out, k).is_file());
    }
    let log = TrainLog::parse_csv(&std::fs::read_to_string(out.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(log.rows.len(), 50 * 5);
}

#[test]
fn train_rerun_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&["train", "--config", s(&smoke_conf()), "--set", "epochs=5", "--out", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let c = tmp.path().join("c");
    let o = run(&["train", "--config", s(&smoke_conf()), "--set", "epochs=5", "--seed", "99", "--out", s(&c)]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(checkpoint_path(&a, 0)).unwrap(), std::fs::read(checkpoint_path(&c, 0)).unwrap());
}

#[test]
fn missing_dataset_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--set", "K=2", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`dataset`"), "{}", stderr(&o));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", s(&smoke_conf()), "--set", "learning_rate=1", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for key in discdiff::config::VALID_KEYS {
        assert!(err.contains(key), "missing {key} in {err}");
    }
}

#[test]
fn train_from_dataset_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data.txt");
    std::fs::write(&data, "0 1\n1 1\n0 0\n1 1\n").unwrap();
    let out = tmp.path().join("run");
    let o = run(&[
        "train", "--set", "S=2", "--set", "d=2", "--set", "K=2", "--set", "n_k=4", "--set", "batch=2",
        "--set", &format!("dataset={}", s(&data)), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("dataset.txt")).unwrap(), "0 1\n1 1\n0 0\n1 1\n");
}

#[test]
fn nan_abort_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", s(&smoke_conf()), "--set", "lr=1e6", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn sample_count_zero_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    assert!(run(&["train", "--config", s(&smoke_conf()), "--set", "epochs=2", "--out", s(&run_dir)]).status.success());
    let empty = tmp.path().join("empty");
    let o = run(&["sample", s(&run_dir), "--count", "0", "--out", s(&empty)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(empty.join("samples.txt")).unwrap(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&["sample", s(&run_dir), "--count", "500", "--seed", "7", "--out", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let text = std::fs::read_to_string(a.join("samples.txt")).unwrap();
    assert_eq!(parse_states(StateSpace::new(2, 1).unwrap(), &text).unwrap().len(), 500);
}

#[test]
fn sample_rejects_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert!(run(&["train", "--config", s(&smoke_conf()), "--set", "epochs=1", "--out", s(&dir)]).status.success());
    let mut net = discdiff::net::ScoreNet::read_checkpoint(&checkpoint_path(&dir, 3)).unwrap();
    net.set_clip(9.0);
    net.write_checkpoint(&checkpoint_path(&dir, 3)).unwrap();
    let o = run(&["sample", s(&dir), "--count", "10", "--out", s(&tmp.path().join("s"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn unit_scores_sample_uniformly() {
    let tmp = tempfile::tempdir().unwrap();
    let space = StateSpace::new(3, 2).unwrap();
    let ones = vec![ScoreTable::constant(space, 1.0).unwrap(); 4];
    write_table_checkpoints(tmp.path(), &ones, 0.5, 2.0);
    let out = tmp.path().join("s");
    let n = 18_000;
    let o = run(&["sample", s(tmp.path()), "--count", &n.to_string(), "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let states = parse_states(space, &std::fs::read_to_string(out.join("samples.txt")).unwrap()).unwrap();
    let mut counts = [0usize; 9];
    for x in &states {
        counts[space.index_of(x).unwrap()] += 1;
    }
    let p = 1.0 / 9.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn evaluate_oracle_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = "S=2\nd=2\nh=0.25\nK=8\np0=product:0.8,0.2;0.35,0.65\n";
    let cfg = RunConfig::from_text(conf).unwrap();
    let p0 = cfg.p0.as_ref().unwrap().resolve(cfg.space().unwrap()).unwrap();
    let tables: Vec<_> = (0..8).map(|k| true_score(&p0, cfg.query_time(k)).unwrap()).collect();
    let ckpt = tmp.path().join("ckpt");
    write_table_checkpoints(&ckpt, &tables, 0.25, 6.0);
    let conf_path = tmp.path().join("eval.conf");
    std::fs::write(&conf_path, conf).unwrap();
    let out = tmp.path().join("eval");
    let o = run(&["evaluate", s(&ckpt), "--config", s(&conf_path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for t in m["error_terms"].as_array().unwrap() {
        assert!(t["A"].as_f64().unwrap() < 1e-12);
        assert!(t["violations"].as_array().unwrap().is_empty());
    }
    let kl = m["kl"].as_f64().unwrap();
    let trunc = m["truncation"]["bound"].as_f64().unwrap();
    let disc = m["discretization"]["bound"].as_f64().unwrap();
    assert!(kl > 0.0 && kl <= trunc + disc, "{kl} vs {trunc} + {disc}");
    let csv = std::fs::read_to_string(out.join("error_terms.csv")).unwrap();
    assert!(csv.starts_with("k,A_k,B_k,C_k\n"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn evaluate_uniform_long_horizon() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("u.conf");
    std::fs::write(
        &conf,
        "S=3\nd=2\nh=0.5\nK=16\nepochs=20\nn_k=2000\nbatch=200\nlr=0.05\nwidth=16\np0=uniform\n",
    )
    .unwrap();
    let run_dir = tmp.path().join("run");
    let o = run(&["train", "--config", s(&conf), "--out", s(&run_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("eval");
    let o = run(&["evaluate", s(&run_dir), "--config", s(&conf), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(m["kl"].as_f64().unwrap() < 1e-3, "{}", m["kl"]);
}

#[test]
fn evaluate_beyond_oracle_cap_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let space = StateSpace::new(2, 21).unwrap();
    let meta = NetMeta {
        interval: 0,
        n_intervals: 1,
        query_time: 0.5,
        seed: 0,
    };
    let net = discdiff::net::ScoreNet::init(space, &discdiff::net::widths_for(&space, 4, 2), 2.0, meta).unwrap();
    write_checkpoints(tmp.path(), &[net]).unwrap();
    let o = run(&[
        "evaluate", s(tmp.path()), "--set", "S=2", "--set", "d=21", "--set", "h=0.5", "--set", "K=1",
        "--set", "p0=uniform", "--out", s(&tmp.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("sampl"));
}

#[test]
fn verify_lists_one_suite_per_invariant() {
    let o = run(&["verify", "--list"]);
    assert!(o.status.success());
    let names: Vec<String> = String::from_utf8(o.stdout).unwrap().lines().map(String::from).collect();
    let modules = [
        "state_process", "score_oracle", "bregman_loss", "score_net", "trainer", "reverse_sampler", "diagnostics", "cli",
    ];
    for m in modules {
        assert!(names.iter().any(|n| n.starts_with(&format!("{m}."))), "no suite for {m}");
    }
    let mut unique = names.clone();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
}

#[test]
fn verify_injected_clip_fails_clipping_suite() {
    let o = run(&["verify", "--clip", "0.5", "--suite", "score_net.clipping_contraction"]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("score_net.clipping_contraction") && out.contains("FAIL"), "{out}");
    let o = run(&["verify", "--suite", "score_net.clipping_contraction"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn hardness_rows_and_range_guard() {
    let o = run(&["hardness", "--eps", "0.01,0.0001"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(4).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!((rows[0][1] - 0.242667).abs() < 1e-6);
    assert!((rows[0][2] - 0.088316).abs() < 1e-6);
    assert!(text.lines().nth(1).unwrap().ends_with("true"));
    assert!((rows[1][1] / 1e-4 - 20.7811).abs() / 20.7811 < 5e-3);
    let o = run(&["hardness", "--eps", "0.05"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn hardness_default_grid_all_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["hardness", "--out", s(tmp.path())]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(tmp.path().join("hardness.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn sweep_singleton_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep", "--config", s(&smoke_conf()), "--set", "epochs=2", "--set", "batch=100", "--set", "sweep_n_k=200",
        "--set", "sweep_seeds=4", "--jobs", "1", "--out", s(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n_k,seed,mean_score_err,kl,wall_ms"));
    assert_eq!(lines.count(), 1);
}

#[test]
fn sweep_duplicate_cells_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep", "--config", s(&smoke_conf()), "--set", "epochs=2", "--set", "batch=100", "--set", "sweep_n_k=200,200,400",
        "--set", "sweep_seeds=1,2", "--jobs", "2", "--out", s(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for i in 0..2 {
        assert_eq!(rows[i][..4], rows[i + 2][..4]);
    }
    assert!(tmp.path().join("summary.json").is_file());
    assert!(tmp.path().join("kl_vs_n.dat").is_file());
}
