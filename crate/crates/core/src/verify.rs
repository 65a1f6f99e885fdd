//! Property suites, one per module invariant, runnable from the CLI.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bregman::{bregman_i, se_minibatch_loss, expected_training_loss};
use crate::config::RunConfig;
use crate::diagnostics::{error_terms, fit_line, hardness_pair, kl, median, score_movement, truncation_error};
use crate::error::{Error, Result};
use crate::interp::realize_table;
use crate::net::{clip_score, widths_for, NetMeta, ScoreNet};
use crate::sampler::{
    exact_reverse_marginal, exact_reverse_marginal_with_tol, sample_reverse, uniformization_interval,
    PreparedInterval, SamplerConfig,
};
use crate::score::{alt_symbol, check_score_bound, forward_generator, reverse_generator, score_bound, true_score, ScoreTable};
use crate::state::{forward_marginal, sample_forward, DistTable, StateSpace, StateVector};
use crate::train::{draw_dataset, frozen_losses, init_nets, train, train_interval, Dataset};

/// Knobs for fault injection.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Clip bound used by the clipping suite instead of its default.
    pub clip_override: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

/// Outcome of a single check: `Ok(detail)` on pass, `Err(detail)` on failure.
pub type Check = std::result::Result<String, String>;

fn lift(r: Result<Check>) -> Check {
    r.unwrap_or_else(|e| Err(format!("error: {e}")))
}

pub const SUITES: &[&str] = &[
    "state_process.semigroup",
    "state_process.forward_consistency",
    "state_process.monte_carlo_agreement",
    "state_process.rate_kernel_link",
    "score_oracle.score_bound",
    "score_oracle.reciprocity",
    "score_oracle.detailed_balance",
    "score_oracle.score_movement",
    "bregman_loss.strong_convexity_sandwich",
    "bregman_loss.triangle_form",
    "bregman_loss.squared_distance_form",
    "bregman_loss.loss_equivalence",
    "score_net.gradient_check",
    "score_net.clipping_contraction",
    "score_net.epoch_determinism",
    "score_net.approximation_realizability",
    "trainer.determinism",
    "trainer.descent",
    "trainer.update_count",
    "trainer.empirical_population_gap",
    "reverse_sampler.distributional_exactness",
    "reverse_sampler.series_truncation",
    "reverse_sampler.jump_count",
    "reverse_sampler.generator_consistency",
    "diagnostics.error_decomposition",
    "diagnostics.truncation",
    "diagnostics.hardness",
    "diagnostics.kl_stability",
];

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Option<Check> {
    let r = match name {
        "state_process.semigroup" => semigroup(200, 0),
        "state_process.forward_consistency" => forward_consistency(100, 1),
        "state_process.monte_carlo_agreement" => monte_carlo_agreement(100_000, 2),
        "state_process.rate_kernel_link" => rate_kernel_link(),
        "score_oracle.score_bound" => score_bound_suite(100, 20, 3),
        "score_oracle.reciprocity" => reciprocity(50, 4),
        "score_oracle.detailed_balance" => detailed_balance(50, 5),
        "score_oracle.score_movement" => score_movement_suite(),
        "bregman_loss.strong_convexity_sandwich" => sandwich(10_000, 1.5, 6),
        "bregman_loss.triangle_form" => triangle_form(10_000, 1.5, 7),
        "bregman_loss.squared_distance_form" => squared_distance_form(10_000, 1.5, 8),
        "bregman_loss.loss_equivalence" => loss_equivalence(1000, 9),
        "score_net.gradient_check" => gradient_check(20, 10),
        "score_net.clipping_contraction" => clipping_contraction(opts.clip_override.unwrap_or(3.0)),
        "score_net.epoch_determinism" => epoch_determinism(),
        "score_net.approximation_realizability" => approximation_realizability(20, 11),
        "trainer.determinism" => trainer_determinism(),
        "trainer.descent" => descent(10),
        "trainer.update_count" => update_count(),
        "trainer.empirical_population_gap" => empirical_population_gap(10),
        "reverse_sampler.distributional_exactness" => distributional_exactness(100_000),
        "reverse_sampler.series_truncation" => series_truncation(12),
        "reverse_sampler.jump_count" => jump_count(10_000, 13),
        "reverse_sampler.generator_consistency" => generator_consistency(14),
        "diagnostics.error_decomposition" => error_decomposition(100, 15),
        "diagnostics.truncation" => truncation_suite(200, 16),
        "diagnostics.hardness" => hardness_grid(),
        "diagnostics.kl_stability" => kl_stability(200, 17),
        _ => return None,
    };
    Some(lift(r))
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&name| {
            let start = Instant::now();
            let check = run_suite(name, opts).expect("suite is registered");
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
        .collect()
}

pub fn report(results: &[SuiteResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<width$}  {}  {:>7} ms  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.millis,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} suites, {} failed\n", results.len(), failed));
    out
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Random full-support law with weights in `[0.05, 1]`.
pub fn random_law<R: Rng + ?Sized>(space: StateSpace, rng: &mut R) -> Result<DistTable> {
    let n = space.n_states()?;
    DistTable::from_weights(space, (0..n).map(|_| rng.random_range(0.05..1.0)).collect())
}

fn random_space<R: Rng + ?Sized>(rng: &mut R, max_s: usize, max_d: usize) -> StateSpace {
    StateSpace::new(rng.random_range(2..=max_s), rng.random_range(1..=max_d)).unwrap()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

// ---------------------------------------------------------------- state ----

pub fn semigroup(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let s = rng.random_range(2..=6);
        let (a, b) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let space = StateSpace::new(s, 1)?;
        let ka = space.token_kernel(a)?;
        let kb = space.token_kernel(b)?;
        let kab = space.token_kernel(a + b)?;
        for i in 0..s {
            for j in 0..s {
                let prod: f64 = (0..s).map(|m| ka.get(i, m) * kb.get(m, j)).sum();
                worst = worst.max((prod - kab.get(i, j)).abs());
            }
        }
    }
    Ok(verdict(worst <= 1e-10, format!("max deviation {worst:.2e} over {trials} pairs")))
}

pub fn forward_consistency(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let space = random_space(&mut rng, 4, 3);
        let p0 = random_law(space, &mut rng)?;
        let (s, t) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let direct = forward_marginal(&p0, s + t)?;
        let chained = forward_marginal(&forward_marginal(&p0, s)?, t)?;
        for (a, b) in direct.probs().iter().zip(chained.probs()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(verdict(worst <= 1e-10, format!("max deviation {worst:.2e} over {trials} laws")))
}

/// `(space, p0, t)` cases for the Monte Carlo comparison.
pub fn monte_carlo_cases() -> Result<Vec<(DistTable, f64)>> {
    let s21 = StateSpace::new(2, 1)?;
    let s32 = StateSpace::new(3, 2)?;
    let s42 = StateSpace::new(4, 2)?;
    let s43 = StateSpace::new(4, 3)?;
    Ok(vec![
        (DistTable::new(s21, vec![0.9, 0.1])?, 0.3),
        (DistTable::product(s32, &[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]])?, 0.5),
        (DistTable::delta(s42, &StateVector(vec![3, 0]))?, 1.0),
        (DistTable::delta(s43, &StateVector(vec![1, 2, 3]))?, 0.1),
        (DistTable::product(s43, &vec![vec![0.85, 0.05, 0.05, 0.05]; 3])?, 0.05),
    ])
}

pub fn monte_carlo_agreement(draws: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let cases = monte_carlo_cases()?;
    for (p0, t) in &cases {
        let space = p0.space();
        let exact = forward_marginal(p0, *t)?;
        let cdf = p0.cdf();
        let mut idx = Vec::with_capacity(draws);
        for _ in 0..draws {
            let x0 = space.state_of(crate::state::draw_from_cdf(&cdf, &mut rng))?;
            idx.push(space.index_of(&sample_forward(&space, &x0, *t, &mut rng)?)?);
        }
        let emp = DistTable::empirical(space, &idx)?;
        worst = worst.max(emp.tv(&exact)?);
    }
    Ok(verdict(
        worst < 0.01,
        format!("max TV {worst:.4} over {} cases, {draws} draws each", cases.len()),
    ))
}

pub fn rate_kernel_link() -> Result<Check> {
    let mut worst_ratio: f64 = 0.0;
    for s in 2..=6 {
        let space = StateSpace::new(s, 1)?;
        let rate = space.token_rate();
        for eps in [1e-3, 3e-4, 1e-4, 1e-5] {
            let k = space.token_kernel(eps)?;
            let mut dev: f64 = 0.0;
            for i in 0..s {
                for j in 0..s {
                    let id = if i == j { 1.0 } else { 0.0 };
                    dev = dev.max(((k.get(i, j) - id) / eps - rate.get(i, j)).abs());
                }
            }
            worst_ratio = worst_ratio.max(dev / (2.0 * eps));
        }
    }
    Ok(verdict(
        worst_ratio <= 1.0,
        format!("max deviation / (2 eps) = {worst_ratio:.3}"),
    ))
}

// ---------------------------------------------------------------- score ----

pub fn score_bound_suite(laws: usize, times: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = log_grid(1e-3, 50.0, times);
    let mut violations = 0;
    for _ in 0..laws {
        let space = random_space(&mut rng, 4, 3);
        let p0 = random_law(space, &mut rng)?;
        let b = score_bound(&p0)?.bound;
        for &t in &grid {
            violations += check_score_bound(&true_score(&p0, t)?, b).violations;
        }
    }
    Ok(verdict(
        violations == 0,
        format!("{violations} violations over {laws} laws x {times} times"),
    ))
}

fn neighbor(space: StateSpace, idx: usize, coord: usize, a: usize) -> usize {
    let stride = space.stride(coord);
    let cur = (idx / stride) % space.symbols();
    idx + a * stride - cur * stride
}

pub fn reciprocity(laws: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..laws {
        let space = random_space(&mut rng, 4, 3);
        let p0 = random_law(space, &mut rng)?;
        let st = true_score(&p0, rng.random_range(0.01..3.0))?;
        let s = space.symbols();
        for x in 0..space.n_states()? {
            for i in 0..space.dims() {
                let cur = (x / space.stride(i)) % s;
                for slot in 0..s - 1 {
                    let a = alt_symbol(cur, slot);
                    let y = neighbor(space, x, i, a);
                    let prod = st.get(x, i, a) * st.get(y, i, cur);
                    worst = worst.max((prod - 1.0).abs());
                }
            }
        }
    }
    Ok(verdict(worst <= 1e-9, format!("max |s s' - 1| = {worst:.2e}")))
}

pub fn detailed_balance(laws: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..laws {
        let space = random_space(&mut rng, 4, 3);
        let p0 = random_law(space, &mut rng)?;
        let t = rng.random_range(0.01..3.0);
        let q = forward_marginal(&p0, t)?;
        let rev = reverse_generator(&true_score(&p0, t)?)?;
        let fwd = forward_generator(space)?;
        let n = space.n_states()?;
        for x in 0..n {
            for y in 0..n {
                if x == y {
                    continue;
                }
                let lhs = q.get(x) * rev[(x, y)];
                let rhs = q.get(y) * fwd[(y, x)];
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(verdict(worst <= 1e-10, format!("max flux mismatch {worst:.2e}")))
}

pub fn score_movement_suite() -> Result<Check> {
    let hs = [0.4, 0.2, 0.1, 0.05];
    let mut slopes = Vec::new();
    let space = StateSpace::new(3, 2)?;
    let laws = [
        DistTable::product(space, &[vec![0.6, 0.3, 0.1], vec![0.2, 0.2, 0.6]])?,
        random_law(space, &mut ChaCha8Rng::seed_from_u64(40))?,
    ];
    for p0 in &laws {
        let mv = hs
            .iter()
            .map(|&h| score_movement(p0, 0.8, h, 64))
            .collect::<Result<Vec<_>>>()?;
        let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = mv.iter().map(|m| m.ln()).collect();
        slopes.push(fit_line(&xs, &ys)?.slope);
    }
    let ok = slopes.iter().all(|s| (0.8..=1.2).contains(s));
    Ok(verdict(ok, format!("log-log slopes {slopes:.3?}")))
}

// -------------------------------------------------------------- bregman ----

fn random_box<R: Rng + ?Sized>(rng: &mut R, m: usize, c: f64) -> Vec<f64> {
    // Log-uniform on [1/C, C].
    (0..m).map(|_| (rng.random_range(-1.0..1.0) * c.ln()).exp()).collect()
}

fn sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn sandwich(pairs: usize, c: f64, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        let m = rng.random_range(1..=8);
        let (x, y) = (random_box(&mut rng, m, c), random_box(&mut rng, m, c));
        let d = bregman_i(&x, &y)?;
        let n2 = sq(&x, &y);
        if d < n2 / (2.0 * c) - 1e-12 || d > c / 2.0 * n2 + 1e-12 {
            bad += 1;
        }
    }
    Ok(verdict(bad == 0, format!("{bad} violations over {pairs} pairs (C = {c})")))
}

pub fn triangle_form(triples: usize, c: f64, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..triples {
        let m = rng.random_range(1..=8);
        let (x, y, z) = (random_box(&mut rng, m, c), random_box(&mut rng, m, c), random_box(&mut rng, m, c));
        let lhs = bregman_i(&x, &y)?;
        let rhs = c * sq(&x, &z) + 2.0 * c * c * bregman_i(&z, &y)?;
        if lhs > rhs + 1e-12 {
            bad += 1;
        }
    }
    Ok(verdict(bad == 0, format!("{bad} violations over {triples} triples")))
}

pub fn squared_distance_form(triples: usize, c: f64, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..triples {
        let m = rng.random_range(1..=8);
        let (x, y, z) = (random_box(&mut rng, m, c), random_box(&mut rng, m, c), random_box(&mut rng, m, c));
        let lhs = bregman_i(&x, &y)?;
        let rhs = c * sq(&x, &z) + c.powi(3) * sq(&z, &y);
        if lhs > rhs + 1e-12 {
            bad += 1;
        }
    }
    Ok(verdict(bad == 0, format!("{bad} violations over {triples} triples")))
}

pub fn loss_equivalence(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let s = rng.random_range(2..=5);
        let m = rng.random_range(1..=3) * (s - 1);
        let batch = rng.random_range(1..=6);
        let r = random_box(&mut rng, m * batch, 5.0);
        let est = random_box(&mut rng, m * batch, 5.0);
        let gap = se_minibatch_loss(&est, &r, m, s)? - se_minibatch_loss(&r, &r, m, s)?;
        let div: f64 = r
            .chunks(m)
            .zip(est.chunks(m))
            .map(|(a, b)| bregman_i(a, b))
            .sum::<Result<f64>>()?;
        worst = worst.max((gap - div / (batch * s) as f64).abs());
    }
    Ok(verdict(worst <= 1e-10, format!("max identity residual {worst:.2e}")))
}

// ------------------------------------------------------------------ net ----

/// Worst relative error between analytic and central-difference gradients
/// over `n_params` random coordinates.
pub fn gradient_error(net: &ScoreNet, states: &[usize], targets: &[f64], n_params: usize, seed: u64) -> Result<f64> {
    let (_, grad) = net.loss_grad(states, targets)?;
    let g = grad.flat();
    let base = net.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let mut p = base.clone();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n_params {
        let i = rng.random_range(0..base.len());
        p[i] = base[i] + step;
        probe.set_params(&p)?;
        let up = probe.loss(states, targets)?;
        p[i] = base[i] - step;
        probe.set_params(&p)?;
        let down = probe.loss(states, targets)?;
        p[i] = base[i];
        let fd = (up - down) / (2.0 * step);
        let denom = fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max((fd - g[i]).abs() / denom);
    }
    Ok(worst)
}

pub fn gradient_check(nets: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let shapes = [(2, 8), (2, 32), (3, 8), (3, 32)];
    for i in 0..nets {
        let (depth, width) = shapes[i % shapes.len()];
        let space = random_space(&mut rng, 4, 3);
        let meta = NetMeta {
            interval: 0,
            n_intervals: 1,
            query_time: rng.random_range(0.1..2.0),
            seed: rng.random(),
        };
        let net = ScoreNet::init(space, &widths_for(&space, width, depth), 4.0, meta)?;
        let batch = 4;
        let states: Vec<usize> = (0..batch * space.dims())
            .map(|_| rng.random_range(0..space.symbols()))
            .collect();
        let targets: Vec<f64> = (0..batch * space.n_alternatives())
            .map(|_| rng.random_range(0.2..4.0))
            .collect();
        worst = worst.max(gradient_error(&net, &states, &targets, 50, rng.random())?);
    }
    Ok(verdict(worst < 1e-5, format!("max relative error {worst:.2e} over {nets} nets")))
}

pub fn clipping_contraction(c: f64) -> Result<Check> {
    let values: Vec<f64> = log_grid(1e-3, 1e3, 241);
    let mut bad = 0;
    let mut pairs = 0;
    let clipped = match clip_score(&values, c) {
        Ok(v) => v,
        Err(e) => return Ok(Err(format!("clip bound {c}: {e}"))),
    };
    for (&v, &cv) in values.iter().zip(&clipped) {
        for &s in values.iter().filter(|&&s| s >= 1.0 / c && s <= c) {
            pairs += 1;
            if (cv - s).abs() > (v - s).abs() + 1e-15 {
                bad += 1;
            }
        }
    }
    Ok(verdict(bad == 0, format!("{bad} violations over {pairs} pairs (C = {c})")))
}

/// Small smoke configuration shared by the suites.
pub fn smoke_config() -> RunConfig {
    RunConfig::from_text(
        "S = 2\nd = 1\nh = 0.2\nK = 5\nepochs = 50\nn_k = 10000\nbatch = 10000\n\
         lr = 0.05\nwidth = 16\ndepth = 2\np0 = product:0.7,0.3\n",
    )
    .expect("smoke config parses")
}

fn smoke_data(cfg: &RunConfig, seed: u64) -> Result<(DistTable, Dataset)> {
    let p0 = cfg.p0.as_ref().expect("smoke p0").resolve(cfg.space()?)?;
    let data = draw_dataset(&p0, cfg.dataset_size(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((p0, data))
}

pub fn epoch_determinism() -> Result<Check> {
    let mut cfg = smoke_config();
    cfg.epochs = 1;
    cfg.batch = 500;
    let (_, data) = smoke_data(&cfg, 0)?;
    let run = || -> Result<Vec<u64>> {
        let mut net = init_nets(&cfg, 2.0)?.remove(2);
        train_interval(&mut net, &data, &cfg, 2, &mut Vec::new())?;
        Ok(net.params().iter().map(|v| v.to_bits()).collect())
    };
    let (a, b) = (run()?, run()?);
    Ok(verdict(a == b, format!("{} parameters compared bitwise", a.len())))
}

pub fn approximation_realizability(tables: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spaces = [(2, 1), (2, 2), (3, 2), (2, 4), (4, 2), (2, 3)];
    let mut worst: f64 = 0.0;
    for i in 0..tables {
        let (s, d) = spaces[i % spaces.len()];
        let space = StateSpace::new(s, d)?;
        let n = space.n_states()?;
        let vals = (0..n * space.n_alternatives())
            .map(|_| (rng.random_range(-2.0..2.0f64)).exp())
            .collect();
        let table = ScoreTable::new(space, vals)?;
        let meta = NetMeta {
            interval: 0,
            n_intervals: 1,
            query_time: rng.random_range(0.1..2.0),
            seed: rng.random(),
        };
        let width = n + rng.random_range(0..4);
        let net = realize_table(&table, width, 10.0, meta)?;
        let raw = ScoreTable::from_model(&crate::net::RawScores(&net))?;
        for (a, b) in raw.values().iter().zip(table.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(verdict(worst < 1e-8, format!("max table error {worst:.2e} over {tables} tables")))
}

// -------------------------------------------------------------- trainer ----

pub fn trainer_determinism() -> Result<Check> {
    let mut cfg = smoke_config();
    cfg.epochs = 5;
    let (p0, data) = smoke_data(&cfg, 1)?;
    let a = train(&data, &cfg, Some(&p0))?;
    let b = train(&data, &cfg, Some(&p0))?;
    let same_nets = a.nets == b.nets;
    let same_log = a.log.to_csv() == b.log.to_csv();
    Ok(verdict(same_nets && same_log, format!("nets equal: {same_nets}, logs equal: {same_log}")))
}

/// Mean recorded loss over the first and last tenth of the updates of `k`.
pub fn trace_endpoints(log: &crate::train::TrainLog, k: usize) -> (f64, f64) {
    let losses: Vec<f64> = log.for_interval(k).map(|r| r.loss).collect();
    let w = (losses.len() / 10).max(1);
    let head = losses[..w].iter().sum::<f64>() / w as f64;
    let tail = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

pub fn descent(seeds: u64) -> Result<Check> {
    let base = smoke_config();
    let mut wins = vec![0u64; base.intervals];
    let mut first = vec![0.0; base.intervals];
    let mut last = vec![0.0; base.intervals];
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed_train = 100 + seed;
        let (p0, data) = smoke_data(&cfg, 200 + seed)?;
        let out = train(&data, &cfg, Some(&p0))?;
        for k in 0..cfg.intervals {
            let (head, tail) = trace_endpoints(&out.log, k);
            first[k] += head / seeds as f64;
            last[k] += tail / seeds as f64;
            if tail < head {
                wins[k] += 1;
            }
        }
    }
    // One-sided sign test: P(X >= w) under Binomial(n, 1/2).
    let p_value = |w: u64| -> f64 {
        let n = seeds;
        let mut tail = 0.0;
        for i in w..=n {
            let mut c = 1.0;
            for j in 0..i {
                c *= (n - j) as f64 / (j + 1) as f64;
            }
            tail += c;
        }
        tail / 2f64.powi(n as i32)
    };
    let ok = (0..base.intervals).all(|k| last[k] < first[k] && p_value(wins[k]) < 0.01);
    Ok(verdict(
        ok,
        format!(
            "per-k wins {wins:?} of {seeds}; mean first {:.4?} last {:.4?}",
            first, last
        ),
    ))
}

pub fn update_count() -> Result<Check> {
    let mut cfg = smoke_config();
    cfg.epochs = 3;
    cfg.n_k = 1000;
    cfg.batch = 300;
    cfg.n_data = Some(1000);
    let (p0, data) = smoke_data(&cfg, 2)?;
    let out = train(&data, &cfg, Some(&p0))?;
    let expect = cfg.epochs * cfg.n_k.div_ceil(cfg.batch);
    let counts: Vec<usize> = (0..cfg.intervals).map(|k| out.log.for_interval(k).count()).collect();
    Ok(verdict(
        counts.iter().all(|&c| c == expect),
        format!("updates per k {counts:?}, expected {expect}"),
    ))
}

pub fn empirical_population_gap(seeds: u64) -> Result<Check> {
    let base = RunConfig::from_text("S=3\nd=2\nh=0.25\nK=4\nbatch=10\nn_k=100\np0=product:0.5,0.3,0.2")?;
    let space = base.space()?;
    let p0 = base.p0.as_ref().unwrap().resolve(space)?;
    let k = 1;
    let oracle = true_score(&p0, base.query_time(k))?;
    let expect = expected_training_loss(&p0, &oracle, k, base.step, base.delta)?;
    let mut medians = Vec::new();
    for n in [100usize, 1000, 10_000] {
        let mut gaps = Vec::new();
        for seed in 0..seeds {
            let data = draw_dataset(&p0, n, &mut ChaCha8Rng::seed_from_u64(1000 + seed))?;
            let losses = frozen_losses(&oracle, &data, &base, k, n / base.batch, 2000 + seed)?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            gaps.push((mean - expect).abs());
        }
        medians.push(median(&gaps));
    }
    let ok = medians.windows(2).all(|w| w[1] < w[0]);
    Ok(verdict(ok, format!("median |empirical - population| {medians:?}")))
}

// -------------------------------------------------------------- sampler ----

/// Trained networks on a small configuration, with their law and config.
pub fn trained_smoke_nets(seed: u64) -> Result<(Vec<ScoreNet>, DistTable, RunConfig)> {
    let cfg = RunConfig::from_text(&format!(
        "S=2\nd=2\nh=0.25\nK=4\nepochs=20\nn_k=2000\nbatch=200\nlr=0.05\nwidth=16\ndepth=2\n\
         p0=product:0.8,0.2;0.3,0.7\nseed_train={seed}"
    ))?;
    let (p0, data) = smoke_data(&cfg, seed)?;
    let out = train(&data, &cfg, Some(&p0))?;
    Ok((out.nets, p0, cfg))
}

pub fn distributional_exactness(draws: usize) -> Result<Check> {
    let mut details = Vec::new();
    let mut worst: f64 = 0.0;
    let mut check = |label: &str, tv: f64| {
        worst = worst.max(tv);
        details.push(format!("{label} {tv:.4}"));
    };
    let smoke = smoke_config();
    let (p0, data) = smoke_data(&smoke, 30)?;
    let nets = train(&data, &smoke, Some(&p0))?.nets;
    let scfg = SamplerConfig::new(smoke.intervals, smoke.step, smoke.delta, 21)?;
    let exact = exact_reverse_marginal(&nets, p0.space(), &scfg)?;
    check("smoke", empirical_tv(&nets, p0.space(), &scfg, draws, &exact)?);

    let (nets, p0, cfg) = trained_smoke_nets(3)?;
    let scfg = SamplerConfig::new(cfg.intervals, cfg.step, cfg.delta, 22)?;
    let exact = exact_reverse_marginal(&nets, p0.space(), &scfg)?;
    check("S=2,d=2", empirical_tv(&nets, p0.space(), &scfg, draws, &exact)?);

    let two = StateSpace::new(2, 1)?;
    let pair = vec![ScoreTable::new(two, vec![1.0 / 3.0, 3.0])?];
    let scfg = SamplerConfig::new(1, 0.5, 0.0, 23)?;
    let exact = exact_reverse_marginal(&pair, two, &scfg)?;
    check("two-state table", empirical_tv(&pair, two, &scfg, draws, &exact)?);
    Ok(verdict(worst < 0.01, format!("TV {}", details.join(", "))))
}

pub fn empirical_tv<M: crate::score::ScoreModel>(
    nets: &[M],
    space: StateSpace,
    cfg: &SamplerConfig,
    draws: usize,
    exact: &DistTable,
) -> Result<f64> {
    let flat = sample_reverse(nets, space, cfg, draws, None)?;
    let idx: Vec<usize> = flat.chunks_exact(space.dims()).map(|x| space.encode(x)).collect();
    DistTable::empirical(space, &idx)?.tv(exact)
}

pub fn series_truncation(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let space = random_space(&mut rng, 3, 3);
        let k_total = rng.random_range(1..=4);
        let tables = (0..k_total)
            .map(|_| {
                let n = space.n_states()? * space.n_alternatives();
                ScoreTable::new(space, (0..n).map(|_| rng.random_range(0.2..5.0)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = SamplerConfig::new(k_total, rng.random_range(0.05..2.0), 0.0, 0)?;
        let a = exact_reverse_marginal_with_tol(&tables, space, &cfg, 1e-12)?;
        let b = exact_reverse_marginal_with_tol(&tables, space, &cfg, 1e-15)?;
        worst = worst.max(a.tv(&b)?);
    }
    Ok(verdict(worst < 1e-9, format!("max TV between cutoffs {worst:.2e}")))
}

pub fn jump_count(intervals: usize, seed: u64) -> Result<Check> {
    let space = StateSpace::new(3, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = space.n_states()? * space.n_alternatives();
    let table = ScoreTable::new(space, (0..n).map(|_| rng.random_range(0.3..3.0)).collect())?;
    let prep = PreparedInterval::new(&table)?;
    let h = 0.7;
    let mean = prep.lambda * h / space.symbols() as f64;
    let mut total = 0u64;
    let mut z = vec![0; space.dims()];
    for _ in 0..intervals {
        total += uniformization_interval(&prep, space, &mut z, h, 1e3, &mut rng)?.0;
    }
    let observed = total as f64 / intervals as f64;
    let sigma = (mean / intervals as f64).sqrt();
    Ok(verdict(
        (observed - mean).abs() <= 3.0 * sigma,
        format!("mean N {observed:.4} vs λh/S {mean:.4} (3σ = {:.4})", 3.0 * sigma),
    ))
}

pub fn generator_consistency(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = StateSpace::new(3, 2)?;
    let n = space.n_states()?;
    let table = ScoreTable::new(
        space,
        (0..n * space.n_alternatives()).map(|_| rng.random_range(0.3..3.0)).collect(),
    )?;
    let q = reverse_generator(&table)?;
    let pi = DMatrix::from_row_slice(1, n, space.stationary()?.probs());
    let drift = &pi * &q;
    let hs = [0.2, 0.1, 0.05, 0.025];
    let mut errs = Vec::new();
    for &h in &hs {
        let cfg = SamplerConfig::new(1, h, 0.0, 0)?;
        let exact = exact_reverse_marginal(std::slice::from_ref(&table), space, &cfg)?;
        let err = (0..n)
            .map(|i| (exact.get(i) - pi[(0, i)] - h * drift[(0, i)]).abs())
            .fold(0.0, f64::max);
        errs.push(err);
    }
    let fit = fit_line(
        &hs.iter().map(|h| h.ln()).collect::<Vec<_>>(),
        &errs.iter().map(|e| e.ln()).collect::<Vec<_>>(),
    )?;
    Ok(verdict(
        (1.8..=2.2).contains(&fit.slope),
        format!("first-order remainder slope {:.3}", fit.slope),
    ))
}

// ---------------------------------------------------------- diagnostics ----

/// Random nets on `S = 3, d = 2` with output scales spread around the clip.
pub fn error_decomposition(nets: usize, seed: u64) -> Result<Check> {
    let space = StateSpace::new(3, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut clipped_cases = 0;
    for i in 0..nets {
        let p0 = random_law(space, &mut rng)?;
        let clip = score_bound(&p0)?.clip;
        let meta = NetMeta {
            interval: 0,
            n_intervals: 1,
            query_time: rng.random_range(0.05..3.0),
            seed: rng.random(),
        };
        let depth = 2 + i % 2;
        let mut net = ScoreNet::init(space, &widths_for(&space, 16, depth), clip, meta)?;
        let scale = rng.random_range(0.5..4.0);
        let p: Vec<f64> = net.params().iter().map(|v| v * scale).collect();
        net.set_params(&p)?;
        let e = error_terms(&p0, &net)?;
        if e.c > 0.0 {
            clipped_cases += 1;
        }
        if !e.violations().is_empty() {
            bad += 1;
        }
    }
    Ok(verdict(
        bad == 0,
        format!("{bad} violating nets of {nets} ({clipped_cases} with active clipping)"),
    ))
}

pub fn truncation_bound(configs: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..configs {
        let space = random_space(&mut rng, 4, 3);
        let p0 = if rng.random_bool(0.3) {
            let x: Vec<usize> = (0..space.dims()).map(|_| rng.random_range(0..space.symbols())).collect();
            DistTable::delta(space, &StateVector(x))?
        } else {
            random_law(space, &mut rng)?
        };
        let t = rng.random_range(0.0..10.0);
        let (v, b) = truncation_error(&p0, t)?;
        if v > b + 1e-15 {
            bad += 1;
        }
    }
    Ok((bad, configs))
}

/// Least-squares slope of `log kl(q_T, π^d)` against `T` on `[2, 8]`.
pub fn truncation_decay_rate(p0: &DistTable) -> Result<f64> {
    let ts: Vec<f64> = (0..=12).map(|i| 2.0 + 0.5 * i as f64).collect();
    let logs = ts
        .iter()
        .map(|&t| truncation_error(p0, t).map(|(v, _)| v.ln()))
        .collect::<Result<Vec<_>>>()?;
    Ok(fit_line(&ts, &logs)?.slope)
}

pub fn truncation_suite(configs: usize, seed: u64) -> Result<Check> {
    let (bad, n) = truncation_bound(configs, seed)?;
    let s = StateSpace::new(2, 1)?;
    let p0 = DistTable::delta(s, &StateVector(vec![0]))?;
    let rate = truncation_decay_rate(&p0)?;
    let rate_ok = (rate + 1.0).abs() <= 0.1;
    Ok(verdict(
        bad == 0 && rate_ok,
        format!("{bad} bound violations over {n} configs; fitted decay rate {rate:.3} (band -1.0 +/- 0.1)"),
    ))
}

pub fn hardness_grid() -> Result<Check> {
    let grid = log_grid(1.0001e-4, 0.039, 60);
    let mut bad = 0;
    for &eps in &grid {
        let r = hardness_pair(eps)?;
        if !r.pass || r.hellinger2 > r.kl {
            bad += 1;
        }
    }
    let small = hardness_pair(1e-4)?;
    let c1 = 24.0 - 25f64.ln();
    let rel = (small.kl / 1e-4 - c1).abs() / c1;
    Ok(verdict(
        bad == 0 && rel < 5e-3,
        format!("{bad} failing eps of {}; KL/eps at 1e-4 off by {:.3}%", grid.len(), 100.0 * rel),
    ))
}

pub fn kl_stability(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let space = random_space(&mut rng, 4, 3);
        let p = random_law(space, &mut rng)?;
        let q = random_law(space, &mut rng)?;
        let jitter = |d: &DistTable, rng: &mut ChaCha8Rng| -> Result<DistTable> {
            let w = d.probs().iter().map(|v| v * (1.0 + rng.random_range(-1e-12..1e-12))).collect();
            DistTable::from_weights(space, w)
        };
        let base = kl(&p, &q)?;
        let moved = kl(&jitter(&p, &mut rng)?, &jitter(&q, &mut rng)?)?;
        worst = worst.max((base - moved).abs());
    }
    Ok(verdict(worst < 1e-9, format!("max KL change {worst:.2e} under 1e-12 perturbations")))
}

/// Maps a suite failure into an error for callers that want `?`.
pub fn require(check: Check) -> Result<String> {
    check.map_err(Error::InvalidParameter)
}
