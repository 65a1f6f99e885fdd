//! Negative entropy, the generalized I-divergence and score-entropy losses.

use crate::error::{Error, Result};
use crate::score::{true_score, ScoreModel};
use crate::state::{forward_marginal, DistTable};

/// Arguments below this are rejected rather than clamped.
pub const MIN_POSITIVE: f64 = 1e-300;

fn check_positive(what: &'static str, x: &[f64]) -> Result<()> {
    for (index, &value) in x.iter().enumerate() {
        if !(value >= MIN_POSITIVE) || !value.is_finite() {
            return Err(Error::NonPositive { what, index, value });
        }
    }
    Ok(())
}

/// `I(x) = sum x_i log x_i`.
pub fn neg_entropy(x: &[f64]) -> Result<f64> {
    check_positive("negative entropy argument", x)?;
    Ok(x.iter().map(|&v| v * v.ln()).sum())
}

/// `D_I(x || y) = sum (-x_i + y_i + x_i log(x_i / y_i))`.
pub fn bregman_i(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "bregman arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    check_positive("bregman first argument", x)?;
    check_positive("bregman second argument", y)?;
    Ok(bregman_i_unchecked(x, y))
}

#[inline]
pub(crate) fn bregman_i_unchecked(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| b - a + a * (a / b).ln())
        .sum()
}

/// `sum (-r log s + s)` over one sample's entries.
#[inline]
pub fn se_term(scores: &[f64], targets: &[f64]) -> f64 {
    scores
        .iter()
        .zip(targets)
        .map(|(&s, &r)| s - r * s.ln())
        .sum()
}

/// The dropped part of `D_I(r || s)`: `sum (r - r log r)`.
#[inline]
pub fn target_constant_term(targets: &[f64]) -> f64 {
    targets.iter().map(|&r| r - r * r.ln()).sum()
}

/// Mean over the batch of `(1/S) sum_{j,a} (-r log s + s)`.
///
/// `scores` and `targets` are flat `batch x m` arrays.
pub fn se_minibatch_loss(scores: &[f64], targets: &[f64], m: usize, symbols: usize) -> Result<f64> {
    if scores.len() != targets.len() || m == 0 || !scores.len().is_multiple_of(m) || scores.is_empty() {
        return Err(Error::Shape(format!(
            "loss over {} scores and {} targets with row length {m}",
            scores.len(),
            targets.len()
        )));
    }
    check_positive("raw score", scores)?;
    check_positive("ratio target", targets)?;
    let batch = scores.len() / m;
    let total: f64 = scores
        .chunks(m)
        .zip(targets.chunks(m))
        .map(|(s, r)| se_term(s, r))
        .sum();
    Ok(total / (batch as f64 * symbols as f64))
}

/// Composite Simpson on `[a, b]` starting at 17 nodes and doubling until two
/// successive estimates differ by less than `tol`.
pub fn simpson_adaptive(f: impl Fn(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    const MAX_LEVEL: u32 = 14;
    if b <= a {
        return Ok(0.0);
    }
    let mut n = 16usize;
    let mut values: Vec<f64> = (0..=n)
        .map(|i| f(a + (b - a) * i as f64 / n as f64))
        .collect::<Result<_>>()?;
    let mut prev = simpson_from_values(&values, a, b);
    for _ in 0..MAX_LEVEL {
        let n2 = 2 * n;
        let mut refined = Vec::with_capacity(n2 + 1);
        for i in 0..n {
            refined.push(values[i]);
            refined.push(f(a + (b - a) * (2 * i + 1) as f64 / n2 as f64)?);
        }
        refined.push(values[n]);
        let next = simpson_from_values(&refined, a, b);
        values = refined;
        n = n2;
        if (next - prev).abs() < tol {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

/// Composite Simpson with a fixed even number of subintervals.
pub fn simpson_fixed(f: impl Fn(f64) -> Result<f64>, a: f64, b: f64, n: usize) -> Result<f64> {
    let n = n.max(2) + n % 2;
    let values: Vec<f64> = (0..=n)
        .map(|i| f(a + (b - a) * i as f64 / n as f64))
        .collect::<Result<_>>()?;
    Ok(simpson_from_values(&values, a, b))
}

fn simpson_from_values(values: &[f64], a: f64, b: f64) -> f64 {
    let n = values.len() - 1;
    let h = (b - a) / n as f64;
    let mut acc = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// `E_{x ~ q_t} D_I(s_t(x) || model(x))` by enumeration.
pub fn expected_bregman_at<M: ScoreModel + ?Sized>(p0: &DistTable, model: &M, t: f64) -> Result<f64> {
    let q = forward_marginal(p0, t)?;
    let truth = true_score(p0, t)?;
    let space = p0.space();
    let m = space.n_alternatives();
    let mut coords = vec![0; space.dims()];
    let mut est = vec![0.0; m];
    let mut acc = 0.0;
    for (idx, &w) in q.probs().iter().enumerate() {
        space.decode_into(idx, &mut coords);
        model.scores_into(&coords, &mut est);
        acc += w * bregman_i(truth.row(idx), &est)?;
    }
    Ok(acc)
}

/// Population loss of interval `k`:
/// `∫_{kh+δ}^{(k+1)h+δ} E_{q_t} D_I(s_t(x) || model(x)) dt`.
pub fn population_se<M: ScoreModel + ?Sized>(
    p0: &DistTable,
    model: &M,
    k: usize,
    h: f64,
    delta: f64,
) -> Result<f64> {
    population_se_with_tol(p0, model, k, h, delta, 1e-8)
}

pub fn population_se_with_tol<M: ScoreModel + ?Sized>(
    p0: &DistTable,
    model: &M,
    k: usize,
    h: f64,
    delta: f64,
    tol: f64,
) -> Result<f64> {
    if model.space() != p0.space() {
        return Err(Error::Shape("model and p0 live on different spaces".into()));
    }
    let a = k as f64 * h + delta;
    simpson_adaptive(|t| expected_bregman_at(p0, model, t), a, a + h, tol)
}

/// `E_{x ~ q_t} (1/S) sum_{i,a} (s - s log s)` with `s = s_t(x)`.
///
/// This is the model-independent part of the expected minibatch loss: given
/// `x_t` the ratio targets average to the true score, so the loss of a model
/// `m` averages to `(1/S) [D_I(s || m) + sum (s - s log s)]`.
pub fn target_constant_at(p0: &DistTable, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidTime(t));
    }
    let q = forward_marginal(p0, t)?;
    let truth = true_score(p0, t)?;
    let acc: f64 = q
        .probs()
        .iter()
        .enumerate()
        .map(|(idx, &w)| w * target_constant_term(truth.row(idx)))
        .sum();
    Ok(acc / p0.space().symbols() as f64)
}

/// Expected recorded training loss of interval `k` for a frozen model:
/// `(1/h) [population_se / S + ∫ target_constant dt]`.
pub fn expected_training_loss<M: ScoreModel + ?Sized>(
    p0: &DistTable,
    model: &M,
    k: usize,
    h: f64,
    delta: f64,
) -> Result<f64> {
    let s = p0.space().symbols() as f64;
    let a = k as f64 * h + delta;
    let pop = population_se(p0, model, k, h, delta)?;
    // The constant's integrand has an integrable log singularity at t = 0;
    // substituting t = a + u^2 smooths it.
    let konst = simpson_adaptive(
        |u| {
            if u == 0.0 {
                Ok(0.0)
            } else {
                Ok(2.0 * u * target_constant_at(p0, a + u * u)?)
            }
        },
        0.0,
        h.sqrt(),
        1e-10,
    )?;
    Ok((pop / s + konst) / h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreTable;
    use crate::state::StateSpace;
    use proptest::prelude::*;

    #[test]
    fn neg_entropy_examples() {
        assert_eq!(neg_entropy(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((neg_entropy(&[e]).unwrap() - e).abs() < 1e-15);
        assert!((neg_entropy(&[0.5, 0.5]).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        assert!(neg_entropy(&[0.0]).is_err());
        assert!(neg_entropy(&[-1.0]).is_err());
    }

    #[test]
    fn bregman_examples() {
        assert_eq!(bregman_i(&[0.3, 2.0], &[0.3, 2.0]).unwrap(), 0.0);
        assert!((bregman_i(&[1.0], &[2.0]).unwrap() - 0.306852819440055).abs() < 1e-12);
        assert!((bregman_i(&[2.0], &[1.0]).unwrap() - 0.386294361119891).abs() < 1e-12);
        assert!(matches!(bregman_i(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(
            bregman_i(&[1e-301], &[1.0]),
            Err(Error::NonPositive { .. })
        ));
    }

    #[test]
    fn minibatch_loss_examples() {
        // s = r pointwise
        let r = [0.5, 2.0, 1.5, 0.25];
        let loss = se_minibatch_loss(&r, &r, 2, 3).unwrap();
        let expect = (target_constant_term(&r[..2]) + target_constant_term(&r[2..])) / (2.0 * 3.0);
        assert!((loss - expect).abs() < 1e-15);
        // r = s = 1: d (S - 1) / S per sample
        let ones = vec![1.0; 4];
        let loss = se_minibatch_loss(&ones, &ones, 4, 3).unwrap();
        assert!((loss - 4.0 / 3.0).abs() < 1e-15);
        assert!(se_minibatch_loss(&[0.0], &[1.0], 1, 2).is_err());
        assert!(se_minibatch_loss(&[1.0, 1.0], &[1.0], 1, 2).is_err());
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson_adaptive(|t| Ok(t * t * t - 2.0 * t + 1.0), 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let v = simpson_fixed(|t| Ok(t.sin()), 0.0, std::f64::consts::PI, 64).unwrap();
        assert!((v - 2.0).abs() < 1e-6);
    }

    #[test]
    fn population_loss_vanishes_for_oracle() {
        // The oracle score at every t is a table that changes with t, so use
        // the static case: uniform p0 has s_t = 1 for all t.
        let space = StateSpace::new(3, 2).unwrap();
        let p0 = space.stationary().unwrap();
        let ones = ScoreTable::constant(space, 1.0).unwrap();
        let v = population_se(&p0, &ones, 2, 0.5, 0.0).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn population_loss_is_nonnegative_and_converged() {
        let space = StateSpace::new(2, 2).unwrap();
        let p0 = DistTable::from_weights(space, vec![4.0, 1.0, 2.0, 3.0]).unwrap();
        let est = ScoreTable::new(space, (0..8).map(|i| 0.5 + 0.2 * i as f64).collect()).unwrap();
        let coarse = simpson_fixed(|t| expected_bregman_at(&p0, &est, t), 0.25, 0.5, 16).unwrap();
        let fine = simpson_fixed(|t| expected_bregman_at(&p0, &est, t), 0.25, 0.5, 32).unwrap();
        assert!(coarse > 0.0);
        assert!((coarse - fine).abs() < 1e-6);
        let v = population_se(&p0, &est, 1, 0.25, 0.0).unwrap();
        assert!((v - fine).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn loss_gap_is_bregman(
            pairs in prop::collection::vec((0.05f64..20.0, 0.05f64..20.0), 1..12),
            symbols in 2usize..6,
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let r: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let m = s.len();
            let gap = se_minibatch_loss(&s, &r, m, symbols).unwrap()
                - se_minibatch_loss(&r, &r, m, symbols).unwrap();
            let d = bregman_i(&r, &s).unwrap() / symbols as f64;
            prop_assert!((gap - d).abs() < 1e-10 * (1.0 + d.abs()));
        }

        #[test]
        fn bregman_nonnegative(x in prop::collection::vec(1e-3f64..1e3, 1..8), scale in 0.01f64..100.0) {
            let y: Vec<f64> = x.iter().map(|v| v * scale).collect();
            prop_assert!(bregman_i(&x, &y).unwrap() >= -1e-12);
        }

        #[test]
        fn partitioned_batch_loss_matches(
            rows in prop::collection::vec(prop::collection::vec((0.1f64..5.0, 0.1f64..5.0), 3), 2..10),
            split in 1usize..9,
        ) {
            let s: Vec<f64> = rows.iter().flatten().map(|p| p.0).collect();
            let r: Vec<f64> = rows.iter().flatten().map(|p| p.1).collect();
            let b = rows.len();
            let split = split.min(b - 1).max(1);
            let whole = se_minibatch_loss(&s, &r, 3, 3).unwrap() * b as f64;
            let left = se_minibatch_loss(&s[..3 * split], &r[..3 * split], 3, 3).unwrap() * split as f64;
            let right = se_minibatch_loss(&s[3 * split..], &r[3 * split..], 3, 3).unwrap() * (b - split) as f64;
            prop_assert!((whole - left - right).abs() < 1e-9);
        }
    }
}
