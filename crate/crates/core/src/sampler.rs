//! Reverse-time sampling by uniformization, and the exact law of its output.
//!
//! Reverse interval `r` (`r = 0` starts at time `T`) uses the network trained
//! for forward interval `K - 1 - r`. Jump rates are `(1/S) ŝ(x)_{i,a}`; the
//! Poisson clock therefore runs at `λ_k / S` where `λ_k` is the largest
//! aggregate score, and each trial moves to `x^{\i} ⊙ a` with probability
//! `ŝ(x)_{i,a} / λ_k`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::score::{alt_symbol, reverse_generator, ScoreModel, ScoreTable};
use crate::state::{DistTable, StateSpace};

pub const DEFAULT_POISSON_GUARD: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub intervals: usize,
    pub step: f64,
    pub delta: f64,
    pub seed: u64,
    /// Largest admissible Poisson mean per interval.
    pub guard: f64,
}

impl SamplerConfig {
    pub fn new(intervals: usize, step: f64, delta: f64, seed: u64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidParameter(format!("step {step}")));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta {delta}")));
        }
        Ok(Self {
            intervals,
            step,
            delta,
            seed,
            guard: DEFAULT_POISSON_GUARD,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.intervals as f64 * self.step + self.delta
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// Reverse interval index.
    pub k: usize,
    /// Effective clock rate `λ_k / S`.
    pub rate: f64,
    pub jumps: u64,
    pub flips: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JumpTrace {
    pub rows: Vec<TraceRow>,
}

impl JumpTrace {
    pub const HEADER: &'static str = "k,lambda,N,flips";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.k, r.rate, r.jumps, r.flips).unwrap();
        }
        out
    }
}

/// `λ = max_x Σ_{i,a} ŝ(x)_{i,a}` and whether it was found by enumeration.
///
/// Beyond the oracle cap the bound `C d (S-1)` from the model's clip is used.
pub fn lambda_k<M: ScoreModel + ?Sized>(model: &M) -> Result<(f64, bool)> {
    let space = model.space();
    if space.is_enumerable() {
        let table = ScoreTable::from_model(model)?;
        let n = space.n_states()?;
        let lam = (0..n).map(|i| table.aggregate(i)).fold(0.0, f64::max);
        return Ok((lam, true));
    }
    let clip = model.clip_bound().ok_or_else(|| {
        Error::OracleCap {
            states: space.cardinality(),
            cap: crate::state::ORACLE_CAP,
        }
    })?;
    Ok((clip * space.n_alternatives() as f64, false))
}

/// Poisson draw by the exp-product method, in chunks of mean at most 30 so
/// that `e^{-mean}` never underflows.
pub fn poisson<R: Rng + ?Sized>(mean: f64, guard: f64, rng: &mut R) -> Result<u64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!("poisson mean {mean}")));
    }
    if mean > guard {
        return Err(Error::PoissonGuard { mean, guard });
    }
    const CHUNK: f64 = 30.0;
    let mut remaining = mean;
    let mut total = 0u64;
    while remaining > 0.0 {
        let m = remaining.min(CHUNK);
        remaining -= m;
        let limit = (-m).exp();
        let mut p: f64 = rng.random();
        while p > limit {
            total += 1;
            p *= rng.random::<f64>();
        }
    }
    Ok(total)
}

/// Score lookup used inside an interval: tabulated when enumerable.
enum Lookup<'a, M: ScoreModel + ?Sized> {
    Table(ScoreTable),
    Model(&'a M),
}

impl<M: ScoreModel + ?Sized> Lookup<'_, M> {
    fn scores(&self, x: &[usize], out: &mut [f64]) {
        match self {
            Self::Table(t) => out.copy_from_slice(t.row(t.space().encode(x))),
            Self::Model(m) => m.scores_into(x, out),
        }
    }
}

/// Prepared interval: score lookup and its rate bound.
pub struct PreparedInterval<'a, M: ScoreModel + ?Sized> {
    lookup: Lookup<'a, M>,
    pub lambda: f64,
    pub exact_lambda: bool,
}

impl<'a, M: ScoreModel + ?Sized> PreparedInterval<'a, M> {
    pub fn new(model: &'a M) -> Result<Self> {
        let space = model.space();
        if space.is_enumerable() {
            let table = ScoreTable::from_model(model)?;
            let n = space.n_states()?;
            let lambda = (0..n).map(|i| table.aggregate(i)).fold(0.0, f64::max);
            Ok(Self {
                lookup: Lookup::Table(table),
                lambda,
                exact_lambda: true,
            })
        } else {
            let (lambda, exact) = lambda_k(model)?;
            Ok(Self {
                lookup: Lookup::Model(model),
                lambda,
                exact_lambda: exact,
            })
        }
    }

    /// Overrides the rate bound; it must still dominate every aggregate.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

/// Runs one interval of length `h` in place; returns `(N, flips)`.
pub fn uniformization_interval<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    prep: &PreparedInterval<'_, M>,
    space: StateSpace,
    z: &mut [usize],
    h: f64,
    guard: f64,
    rng: &mut R,
) -> Result<(u64, u64)> {
    let s = space.symbols();
    let lambda = prep.lambda;
    let n = poisson(lambda * h / s as f64, guard, rng)?;
    let mut scores = vec![0.0; space.n_alternatives()];
    let mut flips = 0;
    for _ in 0..n {
        prep.lookup.scores(z, &mut scores);
        let aggregate: f64 = scores.iter().sum();
        if aggregate > lambda * (1.0 + 1e-12) {
            return Err(Error::RateBound {
                state: space.encode(z),
                aggregate,
                lambda,
            });
        }
        let u = rng.random::<f64>() * lambda;
        let mut acc = 0.0;
        'pick: for i in 0..space.dims() {
            for slot in 0..s - 1 {
                acc += scores[i * (s - 1) + slot];
                if u < acc {
                    z[i] = alt_symbol(z[i], slot);
                    flips += 1;
                    break 'pick;
                }
            }
        }
    }
    Ok((n, flips))
}

/// Prepares every forward network once, in forward order.
pub fn prepare<M: ScoreModel>(nets: &[M]) -> Result<Vec<PreparedInterval<'_, M>>> {
    nets.iter().map(PreparedInterval::new).collect()
}

fn check_nets<M: ScoreModel>(nets: &[M], cfg: &SamplerConfig, space: StateSpace) -> Result<()> {
    if nets.len() != cfg.intervals {
        return Err(Error::Shape(format!(
            "{} networks for K = {}",
            nets.len(),
            cfg.intervals
        )));
    }
    if nets.iter().any(|n| n.space() != space) {
        return Err(Error::Shape("networks live on different spaces".into()));
    }
    Ok(())
}

/// One trajectory: `z_0 ~ π^d`, then `K` intervals with nets in reverse order.
pub fn sample_one<M: ScoreModel, R: Rng + ?Sized>(
    prepared: &[PreparedInterval<'_, M>],
    space: StateSpace,
    cfg: &SamplerConfig,
    z: &mut [usize],
    trace: Option<&mut JumpTrace>,
    rng: &mut R,
) -> Result<()> {
    for c in z.iter_mut() {
        *c = rng.random_range(0..space.symbols());
    }
    let k_total = prepared.len();
    let mut rows = Vec::new();
    for r in 0..k_total {
        let prep = &prepared[k_total - 1 - r];
        let (jumps, flips) = uniformization_interval(prep, space, z, cfg.step, cfg.guard, rng)?;
        rows.push(TraceRow {
            k: r,
            rate: prep.lambda / space.symbols() as f64,
            jumps,
            flips,
        });
    }
    if let Some(t) = trace {
        t.rows.extend(rows);
    }
    Ok(())
}

/// `count` independent outputs as a flat `count x d` array.
pub fn sample_reverse<M: ScoreModel>(
    nets: &[M],
    space: StateSpace,
    cfg: &SamplerConfig,
    count: usize,
    mut trace: Option<&mut JumpTrace>,
) -> Result<Vec<usize>> {
    check_nets(nets, cfg, space)?;
    let prepared = prepare(nets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = space.dims();
    let mut out = vec![0; count * d];
    for z in out.chunks_exact_mut(d) {
        sample_one(&prepared, space, cfg, z, trace.as_deref_mut(), &mut rng)?;
    }
    Ok(out)
}

/// Applies `p <- p (I + Q/Λ)` for the reverse generator of `table`.
fn jump_step(table: &ScoreTable, lam: f64, p: &[f64], out: &mut [f64], coords: &mut [usize]) {
    let space = table.space();
    let s = space.symbols();
    // Rate ŝ/S over clock λ/S.
    let inv = 1.0 / lam;
    out.iter_mut().for_each(|v| *v = 0.0);
    for (x, &px) in p.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        let row = table.row(x);
        let mut stay = 1.0;
        space.decode_into(x, coords);
        for i in 0..space.dims() {
            let stride = space.stride(i);
            let cur = coords[i];
            for slot in 0..s - 1 {
                let a = alt_symbol(cur, slot);
                let prob = row[i * (s - 1) + slot] * inv;
                stay -= prob;
                let y = x + a * stride - cur * stride;
                out[y] += px * prob;
            }
        }
        out[x] += px * stay;
    }
}

/// `p exp(h Q)` by the truncated uniformization series.
pub fn propagate_interval(table: &ScoreTable, p: &[f64], h: f64, tol: f64) -> Result<Vec<f64>> {
    let space = table.space();
    let n = space.n_states()?;
    let s = space.symbols() as f64;
    let lam = (0..n)
        .map(|i| table.aggregate(i))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    // Exit rates are aggregate / S; Λ = lam / S.
    let total_mu = lam / s * h;
    let n_sub = (total_mu / 20.0).ceil().max(1.0) as usize;
    let mu = total_mu / n_sub as f64;
    let mut coords = vec![0; space.dims()];
    let mut cur = p.to_vec();
    for _ in 0..n_sub {
        let mut term = cur.clone();
        let mut next = vec![0.0; n];
        let mut acc = vec![0.0; n];
        let mut w = (-mu).exp();
        let mut m = 0usize;
        loop {
            for (a, t) in acc.iter_mut().zip(&term) {
                *a += w * t;
            }
            // Tail after term m is at most w_{m+1} (m+2)/(m+2-μ) once m+2 > μ.
            let w_next = w * mu / (m + 1) as f64;
            let m2 = (m + 2) as f64;
            if m2 > mu && w_next * m2 / (m2 - mu) < tol {
                break;
            }
            if m > 10_000 {
                return Err(Error::InvalidParameter("uniformization series did not converge".into()));
            }
            jump_step(table, lam, &term, &mut next, &mut coords);
            std::mem::swap(&mut term, &mut next);
            w = w_next;
            m += 1;
        }
        cur = acc;
    }
    Ok(cur)
}

/// Exact law of [`sample_reverse`]'s output (truncation tolerance 1e-12).
pub fn exact_reverse_marginal<M: ScoreModel>(nets: &[M], space: StateSpace, cfg: &SamplerConfig) -> Result<DistTable> {
    exact_reverse_marginal_with_tol(nets, space, cfg, 1e-12)
}

pub fn exact_reverse_marginal_with_tol<M: ScoreModel>(
    nets: &[M],
    space: StateSpace,
    cfg: &SamplerConfig,
    tol: f64,
) -> Result<DistTable> {
    check_nets(nets, cfg, space)?;
    let mut p = space.stationary()?.probs().to_vec();
    for net in nets.iter().rev() {
        let table = ScoreTable::from_model(net)?;
        p = propagate_interval(&table, &p, cfg.step, tol)?;
    }
    DistTable::from_weights(space, p)
}

/// Same law through dense matrix exponentials (Padé scaling and squaring).
pub fn exact_reverse_marginal_expm<M: ScoreModel>(
    nets: &[M],
    space: StateSpace,
    cfg: &SamplerConfig,
) -> Result<DistTable> {
    check_nets(nets, cfg, space)?;
    let n = space.n_states()?;
    let mut p = DMatrix::from_row_slice(1, n, space.stationary()?.probs());
    for net in nets.iter().rev() {
        let q = reverse_generator(&ScoreTable::from_model(net)?)?;
        p *= (q * cfg.step).exp();
    }
    DistTable::from_weights(space, p.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_table() -> ScoreTable {
        let space = StateSpace::new(2, 1).unwrap();
        ScoreTable::new(space, vec![1.0 / 3.0, 3.0]).unwrap()
    }

    #[test]
    fn lambda_examples() {
        let space = StateSpace::new(3, 2).unwrap();
        let ones = ScoreTable::constant(space, 1.0).unwrap();
        assert_eq!(lambda_k(&ones).unwrap(), (4.0, true));
        let ceiling = ScoreTable::constant(space, 2.5).unwrap();
        assert_eq!(lambda_k(&ceiling).unwrap().0, 10.0);
        assert_eq!(lambda_k(&two_state_table()).unwrap().0, 3.0);
    }

    #[test]
    fn poisson_moments_and_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mean in [0.3, 4.0, 75.0] {
            let n = 20_000;
            let draws: Vec<f64> = (0..n).map(|_| poisson(mean, 1e3, &mut rng).unwrap() as f64).collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((m - mean).abs() < 4.0 * (mean / n as f64).sqrt(), "{m} vs {mean}");
            assert!((v / mean - 1.0).abs() < 0.1);
        }
        assert_eq!(poisson(0.0, 1e3, &mut rng).unwrap(), 0);
        assert!(matches!(poisson(2e3, 1e3, &mut rng), Err(Error::PoissonGuard { .. })));
    }

    #[test]
    fn zero_jumps_leave_state() {
        let space = StateSpace::new(3, 2).unwrap();
        let table = ScoreTable::constant(space, 1.0).unwrap();
        let prep = PreparedInterval::new(&table).unwrap();
        let mut z = vec![2, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, flips) = uniformization_interval(&prep, space, &mut z, 0.0, 1e3, &mut rng).unwrap();
        assert_eq!((n, flips, z), (0, 0, vec![2, 1]));
    }

    #[test]
    fn uniform_scores_flip_evenly() {
        let space = StateSpace::new(3, 2).unwrap();
        let table = ScoreTable::constant(space, 1.0).unwrap();
        let prep = PreparedInterval::new(&table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = std::collections::HashMap::new();
        let mut trials = 0;
        while trials < 40_000 {
            let mut z = vec![0, 0];
            // h chosen so that N is mostly 0 or 1.
            let (n, _) = uniformization_interval(&prep, space, &mut z, 0.3, 1e3, &mut rng).unwrap();
            if n == 1 {
                trials += 1;
                *counts.entry(z).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 4);
        for c in counts.values() {
            assert!((*c as f64 / 40_000.0 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn rate_bound_violation_is_reported() {
        let table = two_state_table();
        let space = table.space();
        let prep = PreparedInterval::new(&table).unwrap().with_lambda(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut z = vec![1];
        let r = uniformization_interval(&prep, space, &mut z, 50.0, 1e3, &mut rng);
        assert!(matches!(r, Err(Error::RateBound { .. })));
    }

    #[test]
    fn exact_marginal_two_state_example() {
        let table = two_state_table();
        let space = table.space();
        let cfg = SamplerConfig::new(1, 0.5, 0.0, 0).unwrap();
        let exact = exact_reverse_marginal(std::slice::from_ref(&table), space, &cfg).unwrap();
        let dense = exact_reverse_marginal_expm(&[table], space, &cfg).unwrap();
        assert!((exact.get(0) - 0.7261607165971686).abs() < 1e-12);
        assert!((exact.get(1) - 0.2738392834028314).abs() < 1e-12);
        assert!((exact.get(0) - dense.get(0)).abs() < 1e-10);
    }

    #[test]
    fn stationary_cases() {
        let space = StateSpace::new(3, 2).unwrap();
        let ones = ScoreTable::constant(space, 1.0).unwrap();
        let cfg = SamplerConfig::new(3, 0.4, 0.0, 0).unwrap();
        let nets = vec![ones.clone(), ones.clone(), ones];
        let p = exact_reverse_marginal(&nets, space, &cfg).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-10));
        let cfg0 = SamplerConfig::new(0, 0.4, 0.0, 0).unwrap();
        let p0 = exact_reverse_marginal::<ScoreTable>(&[], space, &cfg0).unwrap();
        assert!(p0.probs().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        let draws = sample_reverse::<ScoreTable>(&[], space, &cfg0, 10, None).unwrap();
        assert_eq!(draws.len(), 20);
    }

    #[test]
    fn series_handles_large_means() {
        let space = StateSpace::new(2, 2).unwrap();
        let vals = vec![5.0, 0.2, 3.0, 0.5, 1.5, 2.5, 0.7, 4.0];
        let table = ScoreTable::new(space, vals).unwrap();
        let cfg = SamplerConfig::new(1, 30.0, 0.0, 0).unwrap();
        let a = exact_reverse_marginal(std::slice::from_ref(&table), space, &cfg).unwrap();
        let b = exact_reverse_marginal_expm(&[table], space, &cfg).unwrap();
        assert!(a.tv(&b).unwrap() < 1e-10);
    }

    #[test]
    fn sampling_is_reproducible() {
        let table = two_state_table();
        let space = table.space();
        let cfg = SamplerConfig::new(2, 0.5, 0.0, 9).unwrap();
        let nets = vec![table.clone(), table];
        let a = sample_reverse(&nets, space, &cfg, 500, None).unwrap();
        let b = sample_reverse(&nets, space, &cfg, 500, None).unwrap();
        assert_eq!(a, b);
    }
}
