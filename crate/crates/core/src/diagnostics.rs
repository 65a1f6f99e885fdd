//! Exact divergences, the per-interval error decomposition, truncation and
//! discretization checks, the two-point hardness pair and the sample-size
//! sweep.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bregman::{bregman_i, simpson_adaptive};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::{RawScores, ScoreNet};
use crate::sampler::{exact_reverse_marginal, SamplerConfig};
use crate::score::{true_score, ScoreModel, ScoreTable};
use crate::state::{forward_marginal, DistTable};
use crate::train::{draw_dataset, train};

/// `Σ p log(p/q)` with `0 log 0 = 0`; `+∞` when `q` misses mass of `p`.
pub fn kl(p: &DistTable, q: &DistTable) -> Result<f64> {
    if p.space() != q.space() {
        return Err(Error::Shape("KL between different spaces".into()));
    }
    let mut acc = 0.0;
    for (&a, &b) in p.probs().iter().zip(q.probs()) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += a * (a / b).ln();
    }
    Ok(acc.max(0.0))
}

/// Expected squared score errors of one interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorTerms {
    /// Clipped network vs true score.
    pub a: f64,
    /// Raw network vs true score.
    pub b: f64,
    /// Raw vs clipped network.
    pub c: f64,
}

impl ErrorTerms {
    pub const TOL: f64 = 1e-9;

    /// Names of the violated inequalities, if any.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.a > 2.0 * self.b + 2.0 * self.c + Self::TOL {
            out.push("A <= 2B + 2C");
        }
        if self.c > self.b + Self::TOL {
            out.push("C <= B");
        }
        if self.a > 4.0 * self.b + Self::TOL {
            out.push("A <= 4B");
        }
        out
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `A, B, C` under `q_t` against the true score at `t`.
pub fn error_terms_models<R, C>(p0: &DistTable, raw: &R, clipped: &C, t: f64) -> Result<ErrorTerms>
where
    R: ScoreModel + ?Sized,
    C: ScoreModel + ?Sized,
{
    let space = p0.space();
    let q = forward_marginal(p0, t)?;
    let truth = true_score(p0, t)?;
    let m = space.n_alternatives();
    let mut coords = vec![0; space.dims()];
    let (mut r, mut c) = (vec![0.0; m], vec![0.0; m]);
    let mut terms = ErrorTerms { a: 0.0, b: 0.0, c: 0.0 };
    for (idx, &w) in q.probs().iter().enumerate() {
        space.decode_into(idx, &mut coords);
        raw.scores_into(&coords, &mut r);
        clipped.scores_into(&coords, &mut c);
        let s = truth.row(idx);
        terms.a += w * sq_dist(s, &c);
        terms.b += w * sq_dist(s, &r);
        terms.c += w * sq_dist(&r, &c);
    }
    Ok(terms)
}

/// Error terms of a network at its own query time.
pub fn error_terms(p0: &DistTable, net: &ScoreNet) -> Result<ErrorTerms> {
    error_terms_models(p0, &RawScores(net), net, net.meta().query_time)
}

pub fn error_terms_csv(terms: &[ErrorTerms]) -> String {
    let mut out = String::from("k,A_k,B_k,C_k\n");
    for (k, t) in terms.iter().enumerate() {
        writeln!(out, "{k},{},{},{}", t.a, t.b, t.c).unwrap();
    }
    out
}

/// `(KL(q_T || π^d), d e^{-T} log S)`.
pub fn truncation_error(p0: &DistTable, horizon: f64) -> Result<(f64, f64)> {
    let space = p0.space();
    let q = forward_marginal(p0, horizon)?;
    let value = kl(&q, &space.stationary()?)?;
    let bound = space.dims() as f64 * (-horizon).exp() * (space.symbols() as f64).ln();
    Ok((value, bound))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport {
    pub continuous: f64,
    pub discrete: f64,
    pub gap: f64,
    pub bound: f64,
}

/// Continuous vs left-rectangle score-error sums.
///
/// `f_k(x) = D_I(s_{t_k}(x) || model_k(x))` with `t_k = δ + k h`; the
/// continuous term integrates `E_{q_t} f_k` over interval `k` by adaptive
/// Simpson, the discrete term uses `h E_{q_{t_k}} f_k`. Both carry `1/S`.
/// The bound is `(S-1) d C λ T h / S` with `λ = d (S-1)/S`.
pub fn discretization_gap<M: ScoreModel>(
    p0: &DistTable,
    models: &[M],
    h: f64,
    delta: f64,
    clip: f64,
) -> Result<GapReport> {
    let space = p0.space();
    let k_total = models.len();
    if k_total == 0 {
        return Err(Error::InvalidParameter("no intervals".into()));
    }
    let n = space.n_states()?;
    let s = space.symbols() as f64;
    let m = space.n_alternatives();
    let mut coords = vec![0; space.dims()];
    let mut est = vec![0.0; m];
    let (mut ct, mut dt) = (0.0, 0.0);
    for (k, model) in models.iter().enumerate() {
        let tk = delta + k as f64 * h;
        let truth = true_score(p0, tk)?;
        let mut f = vec![0.0; n];
        for (idx, fx) in f.iter_mut().enumerate() {
            space.decode_into(idx, &mut coords);
            model.scores_into(&coords, &mut est);
            *fx = bregman_i(truth.row(idx), &est)?;
        }
        let g = |t: f64| -> Result<f64> {
            let q = forward_marginal(p0, t)?;
            Ok(q.probs().iter().zip(&f).map(|(a, b)| a * b).sum())
        };
        ct += simpson_adaptive(g, tk, tk + h, 1e-12)?;
        dt += h * g(tk)?;
    }
    ct /= s;
    dt /= s;
    let horizon = k_total as f64 * h + delta;
    let bound = (s - 1.0) * space.dims() as f64 * clip * space.uniform_rate_bound() * horizon * h / s;
    Ok(GapReport {
        continuous: ct,
        discrete: dt,
        gap: (ct - dt).abs(),
        bound,
    })
}

/// `max_x ‖s_t(x) - s_{start+h}(x)‖_∞` over `t` on a grid of `[start, start + h]`.
pub fn score_movement(p0: &DistTable, start: f64, h: f64, grid: usize) -> Result<f64> {
    let end = true_score(p0, start + h)?;
    let mut worst: f64 = 0.0;
    for i in 0..grid {
        let t = start + h * i as f64 / grid as f64;
        let st = true_score(p0, t)?;
        for (a, b) in st.values().iter().zip(end.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardnessRow {
    pub eps: f64,
    pub kl: f64,
    pub hellinger2: f64,
    pub lower: f64,
    pub pass: bool,
}

/// `P = (1-ε, ε)` against `Q = (1-25ε, 25ε)`: exact `KL(P||Q)`, `H²` and `7.5ε`.
pub fn hardness_pair(eps: f64) -> Result<HardnessRow> {
    if !(eps > 0.0 && eps < 1.0 / 25.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1/25), got {eps}"
        )));
    }
    let kl = (1.0 - eps) * ((1.0 - eps) / (1.0 - 25.0 * eps)).ln() + eps * (1.0f64 / 25.0).ln();
    let hellinger2 = 1.0 - ((1.0 - eps) * (1.0 - 25.0 * eps)).sqrt() - 5.0 * eps;
    let lower = 7.5 * eps;
    Ok(HardnessRow {
        eps,
        kl,
        hellinger2,
        lower,
        pass: hellinger2 > lower,
    })
}

pub fn hardness_table_csv(rows: &[HardnessRow]) -> String {
    let mut out = String::from("eps,kl,hellinger2,lower_7_5eps,pass\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.eps, r.kl, r.hellinger2, r.lower, r.pass).unwrap();
    }
    out
}

/// Ordinary least squares `y = a + b x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
}

impl LineFit {
    /// 95% normal-approximation interval for the slope.
    pub fn slope_ci(&self) -> (f64, f64) {
        (self.slope - 1.96 * self.slope_se, self.slope + 1.96 * self.slope_se)
    }
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(Error::InvalidParameter("line fit needs at least two points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("line fit with constant x".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_se,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidParameter("spearman needs two equal-length series".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// `x y` pairs, one per line.
pub fn two_column(xs: &[f64], ys: &[f64]) -> String {
    let mut out = String::new();
    for (x, y) in xs.iter().zip(ys) {
        writeln!(out, "{x} {y}").unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_k: usize,
    pub seed: u64,
    /// `sqrt(mean_k A_k)`.
    pub mean_score_err: f64,
    pub per_k: Vec<f64>,
    pub kl: f64,
    pub wall_ms: u128,
}

impl SweepRow {
    /// Equality ignoring wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        self.n_k == other.n_k
            && self.seed == other.seed
            && self.mean_score_err.to_bits() == other.mean_score_err.to_bits()
            && self.kl.to_bits() == other.kl.to_bits()
    }
}

pub const SWEEP_HEADER: &str = "n_k,seed,mean_score_err,kl,wall_ms";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.n_k, r.seed, r.mean_score_err, r.kl, r.wall_ms).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub fit: LineFit,
    pub n_values: Vec<usize>,
    pub median_kl: Vec<f64>,
    pub median_err: Vec<f64>,
    pub spearman_kl: f64,
    pub kl_strictly_decreasing: bool,
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Result<SweepSummary> {
    let xs: Vec<f64> = rows.iter().map(|r| (r.n_k as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_score_err.ln()).collect();
    let fit = fit_line(&xs, &ys)?;
    let mut n_values: Vec<usize> = rows.iter().map(|r| r.n_k).collect();
    n_values.sort_unstable();
    n_values.dedup();
    let collect = |n: usize, f: &dyn Fn(&SweepRow) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.n_k == n).map(f).collect()
    };
    let median_kl: Vec<f64> = n_values.iter().map(|&n| median(&collect(n, &|r| r.kl))).collect();
    let median_err: Vec<f64> = n_values
        .iter()
        .map(|&n| median(&collect(n, &|r| r.mean_score_err)))
        .collect();
    let nf: Vec<f64> = n_values.iter().map(|&n| n as f64).collect();
    let spearman_kl = if n_values.len() >= 2 { spearman(&nf, &median_kl)? } else { 0.0 };
    let kl_strictly_decreasing = median_kl.windows(2).all(|w| w[1] < w[0]);
    Ok(SweepSummary {
        fit,
        n_values,
        median_kl,
        median_err,
        spearman_kl,
        kl_strictly_decreasing,
    })
}

/// Configuration of one sweep cell.
pub fn cell_config(base: &RunConfig, n_k: usize, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.n_k = n_k;
    cfg.n_data = None;
    if let Some(b) = base.sweep_batches {
        cfg.batch = n_k.div_ceil(b).max(1);
    } else {
        cfg.batch = cfg.batch.min(n_k);
    }
    cfg.seed_dataset = seed.wrapping_mul(2);
    cfg.seed_train = seed.wrapping_mul(2).wrapping_add(1);
    cfg
}

/// Trains and evaluates one `(n_k, seed)` cell.
pub fn sweep_cell(base: &RunConfig, p0: &DistTable, n_k: usize, seed: u64) -> Result<SweepRow> {
    let start = Instant::now();
    let cfg = cell_config(base, n_k, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_dataset);
    let data = draw_dataset(p0, cfg.dataset_size(), &mut rng)?;
    let trained = train(&data, &cfg, Some(p0))?;
    let per_k = trained
        .nets
        .iter()
        .map(|net| error_terms(p0, net).map(|t| t.a))
        .collect::<Result<Vec<_>>>()?;
    let mean_a = per_k.iter().sum::<f64>() / per_k.len() as f64;
    let scfg = SamplerConfig::new(cfg.intervals, cfg.step, cfg.delta, cfg.seed_sample)?;
    let law = exact_reverse_marginal(&trained.nets, p0.space(), &scfg)?;
    Ok(SweepRow {
        n_k,
        seed,
        mean_score_err: mean_a.sqrt(),
        per_k,
        kl: kl(p0, &law)?,
        wall_ms: start.elapsed().as_millis(),
    })
}

/// Every `(n_k, seed)` cell, run on up to `jobs` threads, ordered by grid
/// position (`n_k` outer, seed inner).
pub fn sweep(base: &RunConfig, p0: &DistTable, n_grid: &[usize], seeds: &[u64], jobs: usize) -> Result<Vec<SweepRow>> {
    if n_grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid is empty (keys `sweep_n_k`, `sweep_seeds`)".into()));
    }
    let cells: Vec<(usize, u64)> = n_grid
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let jobs = jobs.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let (n, s) = cells[i];
                let row = sweep_cell(base, p0, n, s);
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// True-score table at `t` as a model, for oracle fixtures.
pub fn oracle_nets(p0: &DistTable, k_total: usize, h: f64, delta: f64) -> Result<Vec<ScoreTable>> {
    (0..k_total)
        .map(|k| true_score(p0, (k + 1) as f64 * h + delta))
        .collect()
}
