//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use discdiff::config::RunConfig;
use discdiff::diagnostics::{discretization_gap, fit_line, hardness_pair, summarize_sweep, sweep};
use discdiff::interp::{construct_interpolant, max_residual};
use discdiff::net::{widths_for, NetMeta, ScoreNet};
use discdiff::sampler::{exact_reverse_marginal, exact_reverse_marginal_expm, SamplerConfig};
use discdiff::score::{score_bound, ScoreTable};
use discdiff::state::{forward_marginal, StateSpace};
use discdiff::train::{draw_dataset, train};
use discdiff::verify::{self, random_law, Check};
use discdiff::Result;
use discdiff_cli::{cmd_sample, cmd_train, verify_all};

type Outcome = Result<Check>;

fn all(checks: Vec<Check>) -> Check {
    let failed = checks.iter().any(|c| c.is_err());
    let text: Vec<String> = checks.into_iter().map(|c| c.unwrap_or_else(|e| e)).collect();
    if failed {
        Err(text.join("; "))
    } else {
        Ok(text.join("; "))
    }
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn check(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn forward_process() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut id_err, mut lim_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let space = StateSpace::new(rng.random_range(2..=4), rng.random_range(1..=3))?;
        let p0 = random_law(space, &mut rng)?;
        let k0 = space.token_kernel(0.0)?;
        for i in 0..space.symbols() {
            for j in 0..space.symbols() {
                let id = if i == j { 1.0 } else { 0.0 };
                id_err = id_err.max((k0.get(i, j) - id).abs());
            }
        }
        for (a, b) in forward_marginal(&p0, 0.0)?.probs().iter().zip(p0.probs()) {
            id_err = id_err.max((a - b).abs());
        }
        let pi = space.stationary()?;
        for (a, b) in forward_marginal(&p0, 50.0)?.probs().iter().zip(pi.probs()) {
            lim_err = lim_err.max((a - b).abs());
        }
    }
    Ok(all(vec![
        check(id_err <= 1e-12, format!("identity at t=0 err {id_err:.1e} (tol 1e-12)")),
        check(lim_err <= 1e-10, format!("uniform at t=50 err {lim_err:.1e} (tol 1e-10)")),
        verify::semigroup(500, 102)?,
        verify::forward_consistency(200, 103)?,
        verify::monte_carlo_agreement(100_000, 104)?,
    ]))
}

fn score_oracle() -> Outcome {
    Ok(all(vec![
        verify::score_bound_suite(100, 20, 201)?,
        verify::reciprocity(100, 202)?,
        verify::detailed_balance(100, 203)?,
    ]))
}

fn bregman() -> Outcome {
    let mut out = Vec::new();
    for (i, c) in [1.5, 4.0].into_iter().enumerate() {
        let seed = 300 + 10 * i as u64;
        out.push(verify::triangle_form(10_000, c, seed)?);
        out.push(verify::squared_distance_form(10_000, c, seed + 1)?);
        out.push(verify::sandwich(10_000, c, seed + 2)?);
    }
    Ok(all(out))
}

fn autodiff() -> Outcome {
    verify::gradient_check(20, 401)
}

fn interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let mut worst: f64 = 0.0;
    let mut max_points = 0;
    for i in 0..50 {
        let dim = rng.random_range(1..=8);
        let n = if i < 10 { 32 } else { rng.random_range(2..=32) };
        max_points = max_points.max(n);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let interp = construct_interpolant(&points, &values, 2.0, rng.random())?;
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        worst = worst.max(max_residual(&interp, &points, &rows));
    }
    Ok(check(
        worst < 1e-8,
        format!("max residual {worst:.2e} over 50 instances, up to {max_points} points (tol 1e-8)"),
    ))
}

fn sampler() -> Outcome {
    let exact = verify::distributional_exactness(100_000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let space = StateSpace::new(rng.random_range(2..=4), rng.random_range(1..=3))?;
        let n = space.n_states()? * space.n_alternatives();
        let table = ScoreTable::new(space, (0..n).map(|_| rng.random_range(0.1..6.0)).collect())?;
        let cfg = SamplerConfig::new(1, rng.random_range(0.01..2.0), 0.0, 0)?;
        let a = exact_reverse_marginal(std::slice::from_ref(&table), space, &cfg)?;
        let b = exact_reverse_marginal_expm(std::slice::from_ref(&table), space, &cfg)?;
        for (x, y) in a.probs().iter().zip(b.probs()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(all(vec![
        exact,
        check(worst <= 1e-10, format!("series vs expm max diff {worst:.1e} on 30 intervals (tol 1e-10)")),
    ]))
}

fn error_decomposition() -> Outcome {
    verify::error_decomposition(100, 701)
}

fn truncation() -> Outcome {
    let (bad, n) = verify::truncation_bound(200, 801)?;
    let space = StateSpace::new(2, 1)?;
    let p0 = discdiff::state::DistTable::delta(space, &discdiff::state::StateVector(vec![0]))?;
    let rate = verify::truncation_decay_rate(&p0)?;
    Ok(all(vec![
        check(bad == 0, format!("{bad} bound violations over {n} configs")),
        check(
            (rate + 1.0).abs() <= 0.1,
            format!("decay rate of kl in T over [2, 8]: {rate:.4} (band -1.0 +/- 0.1)"),
        ),
    ]))
}

fn discretization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let mut bad = 0;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..20 {
        let space = StateSpace::new(rng.random_range(2..=3), rng.random_range(1..=2))?;
        let p0 = random_law(space, &mut rng)?;
        let clip = score_bound(&p0)?.clip;
        let k_total = rng.random_range(1..=6);
        let h = rng.random_range(0.05..0.5);
        let delta = rng.random_range(0.0..0.2);
        let nets = (0..k_total)
            .map(|k| {
                let meta = NetMeta {
                    interval: k,
                    n_intervals: k_total,
                    query_time: (k + 1) as f64 * h + delta,
                    seed: rng.random(),
                };
                ScoreNet::init(space, &widths_for(&space, 8, 2), clip, meta)
            })
            .collect::<Result<Vec<_>>>()?;
        let g = discretization_gap(&p0, &nets, h, delta, clip)?;
        max_ratio = max_ratio.max(g.gap / g.bound);
        if g.gap > g.bound {
            bad += 1;
        }
    }
    // Slope on the smoke configuration with one trained model held fixed.
    let smoke = verify::smoke_config();
    let p0 = smoke.p0.as_ref().unwrap().resolve(smoke.space()?)?;
    let data = draw_dataset(&p0, smoke.dataset_size(), &mut ChaCha8Rng::seed_from_u64(smoke.seed_dataset))?;
    let trained = train(&data, &smoke, Some(&p0))?;
    let model = &trained.nets[0];
    let hs = [0.2, 0.1, 0.05, 0.025];
    let mut gaps = Vec::new();
    for &h in &hs {
        let k_total = (smoke.horizon / h).round() as usize;
        let models = vec![model.clone(); k_total];
        gaps.push(discretization_gap(&p0, &models, h, 0.0, trained.clip)?.gap);
    }
    let fit = fit_line(
        &hs.iter().map(|h| h.ln()).collect::<Vec<_>>(),
        &gaps.iter().map(|g| g.ln()).collect::<Vec<_>>(),
    )?;
    Ok(all(vec![
        check(bad == 0, format!("{bad} bound violations over 20 configs (max gap/bound {max_ratio:.3})")),
        check(
            (fit.slope - 1.0).abs() <= 0.25,
            format!("gap-vs-h slope {:.3} (band 1.0 +/- 0.25)", fit.slope),
        ),
    ]))
}

fn sweep_criterion() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweep.conf");
    let cfg = RunConfig::from_file(&path)?;
    cfg.validate()?;
    let p0 = cfg.p0.as_ref().unwrap().resolve(cfg.space()?)?;
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let rows = sweep(&cfg, &p0, &cfg.sweep_n_k, &cfg.sweep_seeds, jobs)?;
    let s = summarize_sweep(&rows)?;
    let (lo, hi) = s.fit.slope_ci();
    let setup_ok = cfg.symbols == 3
        && cfg.dims == 2
        && (cfg.horizon - 5.0).abs() < 1e-12
        && (cfg.step - 0.25).abs() < 1e-12
        && cfg.sweep_n_k == [100, 1_000, 10_000, 100_000]
        && cfg.sweep_seeds.len() == 5;
    Ok(all(vec![
        check(setup_ok, "S=3, d=2, T=5, h=0.25, n_k in {1e2..1e5}, 5 seeds".into()),
        check(
            (-0.7..=-0.3).contains(&s.fit.slope),
            format!("score-error slope {:.3} (95% CI [{lo:.3}, {hi:.3}], band [-0.7, -0.3])", s.fit.slope),
        ),
        check(
            s.spearman_kl <= -0.8 && s.kl_strictly_decreasing,
            format!(
                "median KL {}, Spearman {:.2} (<= -0.8), strictly decreasing {}",
                sci(&s.median_kl), s.spearman_kl, s.kl_strictly_decreasing
            ),
        ),
    ]))
}

fn hardness() -> Outcome {
    let n = 60;
    let (lo, hi) = (1e-4f64, 0.039f64);
    let mut bad = 0;
    for i in 1..=n {
        let eps = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / n as f64).exp();
        let r = hardness_pair(eps)?;
        if !(r.hellinger2 > 7.5 * eps) {
            bad += 1;
        }
    }
    let c1 = 24.0 - 25f64.ln();
    let ratio = hardness_pair(1e-4)?.kl / 1e-4;
    let rel = (ratio - c1).abs() / c1;
    Ok(all(vec![
        check(bad == 0, format!("H2 > 7.5 eps fails at {bad} of {n} grid points")),
        check(rel < 5e-3, format!("KL/eps at 1e-4 = {ratio:.4} vs {c1:.4} ({:.3}%, tol 0.5%)", 100.0 * rel)),
    ]))
}

fn reproducibility() -> Outcome {
    let cfg = RunConfig::from_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf"))?;
    let tmp = tempfile::tempdir()?;
    let mut snapshots = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        let samples = tmp.path().join(format!("{name}_samples"));
        cmd_train(&cfg, &run)?;
        cmd_sample(&run, &samples, cfg.samples, cfg.seed_sample)?;
        let mut files = Vec::new();
        for dir in [&run, &samples] {
            let mut entries: Vec<_> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            entries.sort();
            for p in entries {
                files.push((p.file_name().unwrap().to_owned(), std::fs::read(&p)?));
            }
        }
        snapshots.push(files);
    }
    let n = snapshots[0].len();
    Ok(check(
        snapshots[0] == snapshots[1],
        format!("{n} output files of train + sample compared bytewise"),
    ))
}

fn clean_verify() -> Outcome {
    let results = verify_all();
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    Ok(check(
        failing.is_empty(),
        format!("{} suites, failing {failing:?}", results.len()),
    ))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome, Option<u64>); 12] = [
        ("1", "forward process", forward_process, Some(30)),
        ("2", "score oracle", score_oracle, Some(60)),
        ("3", "Bregman inequalities", bregman, Some(10)),
        ("4", "gradient check", autodiff, Some(30)),
        ("5", "interpolation construction", interpolation, Some(30)),
        ("6", "sampler exactness", sampler, Some(60)),
        ("7", "error decomposition", error_decomposition, Some(60)),
        ("8", "truncation", truncation, Some(30)),
        ("9", "discretization gap", discretization, Some(120)),
        ("10", "sample-complexity sweep", sweep_criterion, Some(600)),
        ("11", "hardness table", hardness, Some(1)),
        ("12", "reproducibility", reproducibility, None),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (id, name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Err(format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= Duration::from_secs(b));
        let (passed, detail) = match outcome {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        if !passed {
            failures += 1;
        }
        let budget = budget.map_or("no budget".to_string(), |b| format!("budget {b} s"));
        println!(
            "criterion {id:>2} {name:<28} {}  {:>7.2} s ({budget})  {detail}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if filter.is_empty() {
        let outcome = clean_verify().unwrap_or_else(|e| Err(format!("error: {e}")));
        let passed = outcome.is_ok();
        if !passed {
            failures += 1;
        }
        println!(
            "verify (clean build, all suites)       {}  {}",
            if passed { "PASS" } else { "FAIL" },
            outcome.unwrap_or_else(|e| e)
        );
    }
    if failures > 0 {
        println!("{failures} check(s) failed");
        std::process::exit(1);
    }
}
