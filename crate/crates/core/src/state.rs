//! State space `[S]^d`, the uniform-flip forward chain and its exact marginals.
//!
//! Symbols are 0-indexed: symbol `k` here is symbol `k + 1` in one-based
//! notation. States are enumerated in mixed radix with coordinate 0 the most
//! significant digit, so `(x_0, ..., x_{d-1})` maps to
//! `x_0 S^{d-1} + ... + x_{d-1}`.

use rand::Rng;

use crate::error::{Error, Result};

/// Largest state space the dense oracle paths will enumerate.
pub const ORACLE_CAP: usize = 1 << 20;

/// Absolute tolerance for probability comparisons after renormalization.
pub const PROB_TOL: f64 = 1e-12;

/// Alphabet size `S` and number of coordinates `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StateSpace {
    symbols: usize,
    dims: usize,
}

impl StateSpace {
    pub fn new(symbols: usize, dims: usize) -> Result<Self> {
        if symbols < 2 {
            return Err(Error::InvalidParameter(format!(
                "alphabet size must be at least 2, got {symbols}"
            )));
        }
        if dims == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        Ok(Self { symbols, dims })
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Number of stored score entries per state, `d (S - 1)`.
    pub fn n_alternatives(&self) -> usize {
        self.dims * (self.symbols - 1)
    }

    /// `S^d` as a wide integer; never overflows for realistic inputs.
    pub fn cardinality(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.dims {
            n = n.saturating_mul(self.symbols as u128);
        }
        n
    }

    /// `S^d`, or an oracle-cap error when the space is too large to enumerate.
    pub fn n_states(&self) -> Result<usize> {
        let n = self.cardinality();
        if n > ORACLE_CAP as u128 {
            return Err(Error::OracleCap {
                states: n,
                cap: ORACLE_CAP,
            });
        }
        Ok(n as usize)
    }

    pub fn is_enumerable(&self) -> bool {
        self.cardinality() <= ORACLE_CAP as u128
    }

    pub fn validate(&self, x: &StateVector) -> Result<()> {
        if x.0.len() != self.dims {
            return Err(Error::Shape(format!(
                "state has {} coordinates, space has {}",
                x.0.len(),
                self.dims
            )));
        }
        for (coord, &value) in x.0.iter().enumerate() {
            if value >= self.symbols {
                return Err(Error::InvalidState {
                    coord,
                    value,
                    symbols: self.symbols,
                });
            }
        }
        Ok(())
    }

    pub fn index_of(&self, x: &StateVector) -> Result<usize> {
        self.validate(x)?;
        if self.cardinality() > usize::MAX as u128 {
            return Err(Error::InvalidParameter(
                "state space too large for integer indexing".into(),
            ));
        }
        Ok(self.encode(&x.0))
    }

    pub fn state_of(&self, index: usize) -> Result<StateVector> {
        let n = self.cardinality();
        if index as u128 >= n {
            return Err(Error::IndexOutOfRange {
                index,
                n_states: n.min(usize::MAX as u128) as usize,
            });
        }
        let mut coords = vec![0; self.dims];
        self.decode_into(index, &mut coords);
        Ok(StateVector(coords))
    }

    /// Mixed-radix encoding without validation.
    #[inline]
    pub fn encode(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.symbols + c)
    }

    #[inline]
    pub fn decode_into(&self, mut index: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = index % self.symbols;
            index /= self.symbols;
        }
    }

    /// Stride of coordinate `i` in the mixed-radix index.
    #[inline]
    pub fn stride(&self, i: usize) -> usize {
        self.symbols.pow((self.dims - 1 - i) as u32)
    }

    /// `sup_x sum_{y != x} Q(x, y) = d (S - 1) / S` for the uniform-flip chain.
    pub fn uniform_rate_bound(&self) -> f64 {
        (self.dims * (self.symbols - 1)) as f64 / self.symbols as f64
    }

    pub fn stationary(&self) -> Result<DistTable> {
        let n = self.n_states()?;
        Ok(DistTable {
            space: *self,
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn token_rate(&self) -> TokenRate {
        TokenRate::new(self.symbols).expect("alphabet size validated at construction")
    }

    pub fn token_kernel(&self, t: f64) -> Result<TokenKernel> {
        TokenKernel::new(self.symbols, t)
    }
}

/// A point of `[S]^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StateVector(pub Vec<usize>);

impl StateVector {
    pub fn coords(&self) -> &[usize] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<usize>> for StateVector {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl std::fmt::Display for StateVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Number of coordinates in which `x` and `y` differ.
pub fn hamming(x: &StateVector, y: &StateVector) -> Result<usize> {
    if x.0.len() != y.0.len() {
        return Err(Error::Shape(format!(
            "hamming distance between {}- and {}-coordinate states",
            x.0.len(),
            y.0.len()
        )));
    }
    Ok(x.0.iter().zip(&y.0).filter(|(a, b)| a != b).count())
}

/// Dense probability vector over all `S^d` states.
#[derive(Clone, Debug, PartialEq)]
pub struct DistTable {
    space: StateSpace,
    probs: Vec<f64>,
}

impl DistTable {
    /// Validates nonnegativity and normalization (to 1e-9), then renormalizes
    /// exactly.
    pub fn new(space: StateSpace, probs: Vec<f64>) -> Result<Self> {
        let n = space.n_states()?;
        if probs.len() != n {
            return Err(Error::Shape(format!(
                "table has {} entries, space has {n} states",
                probs.len()
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "probability of state {i} is {p}"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Unnormalized(sum));
        }
        let mut table = Self { space, probs };
        table.renormalize();
        Ok(table)
    }

    /// Builds a table from arbitrary nonnegative weights.
    pub fn from_weights(space: StateSpace, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "weights must have positive finite sum, got {sum}"
            )));
        }
        Self::new(space, weights.into_iter().map(|w| w / sum).collect())
    }

    /// Point mass at `x`.
    pub fn delta(space: StateSpace, x: &StateVector) -> Result<Self> {
        let n = space.n_states()?;
        let mut probs = vec![0.0; n];
        probs[space.index_of(x)?] = 1.0;
        Ok(Self { space, probs })
    }

    /// Product of per-coordinate marginals, each of length `S`.
    pub fn product(space: StateSpace, marginals: &[Vec<f64>]) -> Result<Self> {
        if marginals.len() != space.dims() {
            return Err(Error::Shape(format!(
                "{} marginals for {} coordinates",
                marginals.len(),
                space.dims()
            )));
        }
        for m in marginals {
            if m.len() != space.symbols() {
                return Err(Error::Shape(format!(
                    "marginal of length {} for alphabet size {}",
                    m.len(),
                    space.symbols()
                )));
            }
        }
        let n = space.n_states()?;
        let mut coords = vec![0; space.dims()];
        let weights = (0..n)
            .map(|idx| {
                space.decode_into(idx, &mut coords);
                coords
                    .iter()
                    .zip(marginals)
                    .map(|(&c, m)| m[c])
                    .product::<f64>()
            })
            .collect();
        Self::from_weights(space, weights)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probs[index]
    }

    fn renormalize(&mut self) {
        let sum: f64 = self.probs.iter().sum();
        for p in &mut self.probs {
            *p /= sum;
        }
    }

    /// Marginal law of coordinate `i`.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let s = self.space.symbols();
        let stride = self.space.stride(i);
        let mut out = vec![0.0; s];
        for (idx, &p) in self.probs.iter().enumerate() {
            out[(idx / stride) % s] += p;
        }
        out
    }

    /// Index of the first zero-probability state, if any.
    pub fn first_zero(&self) -> Option<usize> {
        self.probs.iter().position(|&p| p <= 0.0)
    }

    /// Total variation distance `1/2 sum |p - q|`.
    pub fn tv(&self, other: &DistTable) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::Shape("tv between different state spaces".into()));
        }
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    /// Empirical law of a list of state indices.
    pub fn empirical(space: StateSpace, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("empirical law of zero samples".into()));
        }
        let n = space.n_states()?;
        let mut counts = vec![0.0; n];
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n_states: n });
            }
            counts[i] += 1.0;
        }
        Self::from_weights(space, counts)
    }

    /// Cumulative distribution used for inverse-CDF draws.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }
}

/// Inverse-CDF draw of an index from a cumulative table.
pub fn draw_from_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().expect("nonempty cdf");
    let u = rng.random::<f64>() * total;
    let idx = cdf.partition_point(|&c| c <= u);
    idx.min(cdf.len() - 1)
}

/// Per-token transition matrix `P_{0,t} = (1 - e^{-t})/S 11^T + e^{-t} I`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenKernel {
    symbols: usize,
    time: f64,
    entries: Vec<f64>,
}

impl TokenKernel {
    pub fn new(symbols: usize, t: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidTime(t));
        }
        if symbols < 2 {
            return Err(Error::InvalidParameter(format!(
                "alphabet size must be at least 2, got {symbols}"
            )));
        }
        let (same, diff) = Self::closed_form(symbols, t);
        let mut entries = vec![diff; symbols * symbols];
        for a in 0..symbols {
            entries[a * symbols + a] = same;
        }
        Ok(Self {
            symbols,
            time: t,
            entries,
        })
    }

    /// Diagonal and off-diagonal entries of the kernel at time `t`.
    #[inline]
    pub fn closed_form(symbols: usize, t: f64) -> (f64, f64) {
        let decay = (-t).exp();
        let off = -(-t).exp_m1() / symbols as f64;
        (off + decay, off)
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.symbols + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.symbols..(from + 1) * self.symbols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Per-token generator `Q^tok = (1/S) 11^T - I`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRate {
    symbols: usize,
    entries: Vec<f64>,
}

impl TokenRate {
    pub fn new(symbols: usize) -> Result<Self> {
        if symbols < 2 {
            return Err(Error::InvalidParameter(format!(
                "token rate needs at least 2 symbols, got {symbols}"
            )));
        }
        let off = 1.0 / symbols as f64;
        let mut entries = vec![off; symbols * symbols];
        for a in 0..symbols {
            entries[a * symbols + a] = off - 1.0;
        }
        Ok(Self { symbols, entries })
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.symbols + to]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }
}

/// Exact marginal `q_t` of the factorized forward chain started at `p0`.
///
/// Applies the per-token kernel along each axis in turn (`d S^{d+1}` work).
pub fn forward_marginal(p0: &DistTable, t: f64) -> Result<DistTable> {
    let sum: f64 = p0.probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Unnormalized(sum));
    }
    let space = p0.space;
    let kernel = space.token_kernel(t)?;
    let s = space.symbols();
    let mut cur = p0.probs.clone();
    let mut next = vec![0.0; cur.len()];
    let mut buf = vec![0.0; s];
    for i in 0..space.dims() {
        let stride = space.stride(i);
        let block = stride * s;
        for base in (0..cur.len()).step_by(block) {
            for offset in 0..stride {
                for (b, slot) in buf.iter_mut().enumerate() {
                    *slot = cur[base + b * stride + offset];
                }
                for a in 0..s {
                    let mut acc = 0.0;
                    for (b, &v) in buf.iter().enumerate() {
                        acc += v * kernel.get(b, a);
                    }
                    next[base + a * stride + offset] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let mut out = DistTable {
        space,
        probs: cur,
    };
    out.renormalize();
    Ok(out)
}

/// Draws `x_t` given `x_0` by corrupting each coordinate independently with
/// the per-token kernel row.
pub fn sample_forward<R: Rng + ?Sized>(
    space: &StateSpace,
    x0: &StateVector,
    t: f64,
    rng: &mut R,
) -> Result<StateVector> {
    space.validate(x0)?;
    let kernel = space.token_kernel(t)?;
    let mut out = x0.0.clone();
    corrupt_in_place(&kernel, &mut out, rng);
    Ok(out.into())
}

/// Allocation-free corruption used by the trainer's inner loop.
#[inline]
pub(crate) fn corrupt_in_place<R: Rng + ?Sized>(
    kernel: &TokenKernel,
    coords: &mut [usize],
    rng: &mut R,
) {
    let s = kernel.symbols();
    for c in coords.iter_mut() {
        let row = kernel.row(*c);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = s - 1;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = a;
                break;
            }
        }
        *c = pick;
    }
}
