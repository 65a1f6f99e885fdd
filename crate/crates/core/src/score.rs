//! Exact concrete scores, ratio targets, score bounds and the reverse generator.
//!
//! Score layout: for each state, for each coordinate `i`, the `S - 1`
//! alternative symbols in increasing order skipping `x^i`. The self entry is
//! never stored; aggregates are summed on demand.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::state::{forward_marginal, DistTable, StateSpace, StateVector, TokenKernel};

/// Symbol stored at alternative slot `j` for a coordinate currently at `current`.
#[inline]
pub fn alt_symbol(current: usize, j: usize) -> usize {
    if j < current {
        j
    } else {
        j + 1
    }
}

/// Alternative slot of symbol `a != current`.
#[inline]
pub fn alt_slot(current: usize, a: usize) -> usize {
    debug_assert_ne!(current, a);
    if a < current {
        a
    } else {
        a - 1
    }
}

/// Anything that yields the `d (S - 1)` score entries at a state.
pub trait ScoreModel {
    fn space(&self) -> StateSpace;

    /// Writes the scores of state `x` into `out` (length `d (S - 1)`).
    fn scores_into(&self, x: &[usize], out: &mut [f64]);

    /// Componentwise upper bound on the scores, when one is enforced.
    fn clip_bound(&self) -> Option<f64> {
        None
    }
}

/// Score entries for every state of an enumerable space.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    space: StateSpace,
    values: Vec<f64>,
}

impl ScoreTable {
    pub fn new(space: StateSpace, values: Vec<f64>) -> Result<Self> {
        let n = space.n_states()?;
        let m = space.n_alternatives();
        if values.len() != n * m {
            return Err(Error::Shape(format!(
                "score table has {} entries, expected {}",
                values.len(),
                n * m
            )));
        }
        Ok(Self { space, values })
    }

    /// Every entry equal to `value`.
    pub fn constant(space: StateSpace, value: f64) -> Result<Self> {
        let n = space.n_states()?;
        Ok(Self {
            space,
            values: vec![value; n * space.n_alternatives()],
        })
    }

    /// Enumerates a score model over all states.
    pub fn from_model<M: ScoreModel + ?Sized>(model: &M) -> Result<Self> {
        let space = model.space();
        let n = space.n_states()?;
        let m = space.n_alternatives();
        let mut values = vec![0.0; n * m];
        let mut coords = vec![0; space.dims()];
        for (idx, row) in values.chunks_mut(m).enumerate() {
            space.decode_into(idx, &mut coords);
            model.scores_into(&coords, row);
        }
        Ok(Self { space, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let m = self.space.n_alternatives();
        &self.values[state * m..(state + 1) * m]
    }

    /// Entry `s(x)_{i,a}` for `a != x^i`.
    pub fn get(&self, state: usize, coord: usize, symbol: usize) -> f64 {
        let s = self.space.symbols();
        let current = (state / self.space.stride(coord)) % s;
        self.row(state)[coord * (s - 1) + alt_slot(current, symbol)]
    }

    /// Aggregate `sum_i sum_{a != x^i} s(x)_{i,a}`.
    pub fn aggregate(&self, state: usize) -> f64 {
        self.row(state).iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            space: self.space,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Flat CSV dump, state-index major: `state,coord,symbol,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,coord,symbol,value\n");
        let s = self.space.symbols();
        let mut coords = vec![0; self.space.dims()];
        for state in 0..self.values.len() / self.space.n_alternatives() {
            self.space.decode_into(state, &mut coords);
            let row = self.row(state);
            for (i, &c) in coords.iter().enumerate() {
                for j in 0..s - 1 {
                    let v = row[i * (s - 1) + j];
                    out.push_str(&format!("{state},{i},{},{v:e}\n", alt_symbol(c, j)));
                }
            }
        }
        out
    }
}

impl ScoreModel for ScoreTable {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn scores_into(&self, x: &[usize], out: &mut [f64]) {
        out.copy_from_slice(self.row(self.space.encode(x)));
    }
}

/// Ratio table `q(x^{\i} ⊙ a) / q(x)` of a full-support distribution.
pub fn ratio_table(q: &DistTable) -> Result<ScoreTable> {
    if let Some(state) = q.first_zero() {
        return Err(Error::FullSupport {
            state,
            prob: q.get(state),
        });
    }
    let space = q.space();
    let s = space.symbols();
    let m = space.n_alternatives();
    let n = q.len();
    let probs = q.probs();
    let mut values = vec![0.0; n * m];
    for (idx, row) in values.chunks_mut(m).enumerate() {
        let qx = probs[idx];
        for i in 0..space.dims() {
            let stride = space.stride(i);
            let current = (idx / stride) % s;
            let base = idx - current * stride;
            for j in 0..s - 1 {
                let a = alt_symbol(current, j);
                row[i * (s - 1) + j] = probs[base + a * stride] / qx;
            }
        }
    }
    Ok(ScoreTable { space, values })
}

/// True concrete score `s_t(x)_{i,a} = q_t(x^{\i} ⊙ a) / q_t(x)`.
pub fn true_score(p0: &DistTable, t: f64) -> Result<ScoreTable> {
    ratio_table(&forward_marginal(p0, t)?)
}

/// Training targets `P_{0,t}[x0^j, a] / P_{0,t}[x0^j, xt^j]`, in score layout
/// relative to `xt`.
pub fn ratio_targets(
    space: &StateSpace,
    x0: &StateVector,
    xt: &StateVector,
    t: f64,
) -> Result<Vec<f64>> {
    space.validate(x0)?;
    space.validate(xt)?;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidTime(t));
    }
    let kernel = space.token_kernel(t)?;
    let mut out = vec![0.0; space.n_alternatives()];
    ratio_targets_into(&kernel, &x0.0, &xt.0, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn ratio_targets_into(kernel: &TokenKernel, x0: &[usize], xt: &[usize], out: &mut [f64]) {
    let s = kernel.symbols();
    for (j, (&a0, &at)) in x0.iter().zip(xt).enumerate() {
        let denom = kernel.get(a0, at);
        for slot in 0..s - 1 {
            let a = alt_symbol(at, slot);
            out[j * (s - 1) + slot] = kernel.get(a0, a) / denom;
        }
    }
}

/// Score bound `B`, marginal imbalances `κ_i` and clip bound `C = 1.5 B`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBoundReport {
    pub bound: f64,
    pub kappa: Vec<f64>,
    pub kappa_sq: f64,
    pub clip: f64,
}

pub fn score_bound(p0: &DistTable) -> Result<ScoreBoundReport> {
    let table = ratio_table(p0)?;
    let bound = table
        .values()
        .iter()
        .fold(1.0f64, |acc, &v| acc.max(v).max(1.0 / v));
    let kappa: Vec<f64> = (0..p0.space().dims())
        .map(|i| {
            let m = p0.marginal(i);
            let max = m.iter().cloned().fold(f64::MIN, f64::max);
            let min = m.iter().cloned().fold(f64::MAX, f64::min);
            max / min
        })
        .collect();
    let kappa_sq = kappa.iter().map(|k| k * k).sum();
    Ok(ScoreBoundReport {
        bound,
        kappa,
        kappa_sq,
        clip: 1.5 * bound,
    })
}

/// Add-`alpha` smoothed empirical law, `(count + alpha) / (n + alpha S^d)`.
pub fn smoothed_empirical(space: StateSpace, indices: &[usize], alpha: f64) -> Result<DistTable> {
    if indices.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "smoothing must be positive, got {alpha}"
        )));
    }
    let n = space.n_states()?;
    let mut w = vec![alpha; n];
    for &i in indices {
        w[i] += 1.0;
    }
    DistTable::from_weights(space, w)
}

/// Dense reverse generator: rate `(1/S) s(x)_{i,a}` from `x` to `x^{\i} ⊙ a`,
/// diagonal equal to minus the row sum.
pub fn reverse_generator(score: &ScoreTable) -> Result<DMatrix<f64>> {
    let space = score.space;
    let n = space.n_states()?;
    let s = space.symbols();
    let inv_s = 1.0 / s as f64;
    let mut q = DMatrix::zeros(n, n);
    for x in 0..n {
        let row = score.row(x);
        let mut total = 0.0;
        for i in 0..space.dims() {
            let stride = space.stride(i);
            let current = (x / stride) % s;
            let base = x - current * stride;
            for j in 0..s - 1 {
                let a = alt_symbol(current, j);
                let rate = inv_s * row[i * (s - 1) + j];
                q[(x, base + a * stride)] = rate;
                total += rate;
            }
        }
        q[(x, x)] = -total;
    }
    Ok(q)
}

/// Dense global forward generator `Q(x, y)` of the uniform-flip chain.
pub fn forward_generator(space: StateSpace) -> Result<DMatrix<f64>> {
    reverse_generator(&ScoreTable::constant(space, 1.0)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundViolation {
    pub state: usize,
    pub coord: usize,
    pub symbol: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub passed: bool,
    pub violations: usize,
    /// Entry furthest outside `[1/B, B]` (in log scale), if any.
    pub worst: Option<BoundViolation>,
}

/// Checks `1/B - 1e-9 <= s <= B + 1e-9` for every entry.
pub fn check_score_bound(score: &ScoreTable, bound: f64) -> BoundCheck {
    let space = score.space;
    let s = space.symbols();
    let m = space.n_alternatives();
    let (lo, hi) = (1.0 / bound - 1e-9, bound + 1e-9);
    let mut violations = 0;
    let mut worst: Option<(f64, BoundViolation)> = None;
    for (idx, &v) in score.values.iter().enumerate() {
        if v >= lo && v <= hi {
            continue;
        }
        violations += 1;
        let excess = (v.ln().abs() - bound.ln()).abs();
        if worst.as_ref().map_or(true, |(e, _)| excess > *e) {
            let state = idx / m;
            let coord = (idx % m) / (s - 1);
            let current = (state / space.stride(coord)) % s;
            worst = Some((
                excess,
                BoundViolation {
                    state,
                    coord,
                    symbol: alt_symbol(current, idx % (s - 1)),
                    value: v,
                },
            ));
        }
    }
    BoundCheck {
        passed: violations == 0,
        violations,
        worst: worst.map(|(_, w)| w),
    }
}
