//! Per-interval feed-forward score network with hand-written backpropagation.
//!
//! Input: one-hot encoding of every coordinate (`d S` slots) followed by one
//! time slot holding the interval's query time `t' = (k+1) h + δ`. Hidden
//! layers use `tanh` (smooth, 1-Lipschitz, zero at zero). The final affine
//! outputs `z` are mapped through `exp`, so raw scores are strictly positive.
//! Clipping to `[1/C, C]` is applied only when scores are consumed by the
//! sampler and the error diagnostics; training always sees raw scores.
//!
//! ## Checkpoint format (version 1, all integers and floats little-endian)
//!
//! | bytes            | field                                       |
//! |------------------|---------------------------------------------|
//! | 8                | magic `b"DDSNET\0\0"`                        |
//! | 4 (u32)          | format version (= 1)                        |
//! | 4 (u32)          | alphabet size `S`                           |
//! | 4 (u32)          | dimension `d`                               |
//! | 4 (u32)          | number of intervals `K`                     |
//! | 4 (u32)          | interval index `k` of this network          |
//! | 4 (u32)          | number of affine layers `L`                 |
//! | 4 × (L+1) (u32)  | layer widths, input first                   |
//! | 8 (f64)          | clip bound `C`                              |
//! | 8 (u64)          | initialization seed                         |
//! | 8 (f64)          | query time `t'`                             |
//! | 8 (u64)          | parameter count `P`                         |
//! | 8 × P (f64)      | parameters: per layer, weights row-major    |
//! |                  | (`out × in`) then biases                    |

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::score::ScoreModel;
use crate::state::StateSpace;

const MAGIC: &[u8; 8] = b"DDSNET\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    #[inline]
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.n_in).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Metadata carried into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetMeta {
    pub interval: usize,
    pub n_intervals: usize,
    pub query_time: f64,
    pub seed: u64,
}

/// Widths of a network with `depth` affine layers and hidden width `width`.
pub fn widths_for(space: &StateSpace, width: usize, depth: usize) -> Vec<usize> {
    let mut w = vec![space.dims() * space.symbols() + 1];
    w.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
    w.push(space.n_alternatives());
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    space: StateSpace,
    layers: Vec<Layer>,
    clip: f64,
    meta: NetMeta,
}

/// Gradient with the same shapes as the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<Layer>,
}

impl GradBundle {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Reusable activations for forward/backward passes.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(layers: &[Layer]) -> Self {
        let mut acts = vec![vec![0.0; layers[0].n_in]];
        acts.extend(layers.iter().map(|l| vec![0.0; l.n_out]));
        let deltas = layers.iter().map(|l| vec![0.0; l.n_out]).collect();
        Self { acts, deltas }
    }
}

/// Projection of a raw score onto `[1/C, C]`.
pub fn clip_score(raw: &[f64], clip: f64) -> Result<Vec<f64>> {
    if !(clip > 1.0) || !clip.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "clip bound must exceed 1, got {clip}"
        )));
    }
    Ok(raw.iter().map(|&v| clip_value(v, clip)).collect())
}

#[inline]
pub fn clip_value(v: f64, clip: f64) -> f64 {
    v.max(1.0 / clip).min(clip)
}

impl ScoreNet {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(
        space: StateSpace,
        widths: &[usize],
        clip: f64,
        meta: NetMeta,
    ) -> Result<Self> {
        Self::check_widths(&space, widths)?;
        if !(clip > 1.0) || !clip.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "clip bound must exceed 1, got {clip}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut layer = Layer::zeros(w[0], w[1]);
                let scale = 1.0 / (w[0] as f64).sqrt();
                for v in &mut layer.weights {
                    *v = rng.random_range(-scale..scale);
                }
                layer
            })
            .collect();
        Ok(Self {
            space,
            layers,
            clip,
            meta,
        })
    }

    /// Network from explicit layers (used by the interpolation constructor).
    pub fn from_layers(space: StateSpace, layers: Vec<Layer>, clip: f64, meta: NetMeta) -> Result<Self> {
        let mut widths = vec![layers.first().map_or(0, |l| l.n_in)];
        widths.extend(layers.iter().map(|l| l.n_out));
        Self::check_widths(&space, &widths)?;
        for pair in layers.windows(2) {
            if pair[0].n_out != pair[1].n_in {
                return Err(Error::Shape("consecutive layer widths disagree".into()));
            }
        }
        for l in &layers {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::Shape("layer buffers do not match widths".into()));
            }
        }
        Ok(Self {
            space,
            layers,
            clip,
            meta,
        })
    }

    fn check_widths(space: &StateSpace, widths: &[usize]) -> Result<()> {
        if widths.len() < 2 {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!("layer {i} has zero width")));
        }
        let n_in = space.dims() * space.symbols() + 1;
        if widths[0] != n_in {
            return Err(Error::Shape(format!(
                "input width {} but encoding needs {n_in}",
                widths[0]
            )));
        }
        if *widths.last().unwrap() != space.n_alternatives() {
            return Err(Error::Shape(format!(
                "output width {} but scores need {}",
                widths.last().unwrap(),
                space.n_alternatives()
            )));
        }
        Ok(())
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn set_clip(&mut self, clip: f64) {
        self.clip = clip;
    }

    pub fn meta(&self) -> NetMeta {
        self.meta
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].n_in];
        w.extend(self.layers.iter().map(|l| l.n_out));
        w
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.n_params()
            )));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Largest absolute parameter; logged, not constrained.
    pub fn max_abs_weight(&self) -> f64 {
        self.params().iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn encode(&self, x: &[usize], input: &mut [f64]) {
        input.iter_mut().for_each(|v| *v = 0.0);
        let s = self.space.symbols();
        for (i, &c) in x.iter().enumerate() {
            input[i * s + c] = 1.0;
        }
        *input.last_mut().unwrap() = self.meta.query_time;
    }

    fn forward_ws(&self, x: &[usize], ws: &mut Workspace) {
        self.encode(x, &mut ws.acts[0]);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let out = &mut after[0];
            layer.apply(&before[l], out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                out.iter_mut().for_each(|v| *v = v.exp());
            }
        }
    }

    /// Unclipped, strictly positive scores at `x`.
    pub fn forward_raw(&self, x: &[usize]) -> Vec<f64> {
        let mut ws = Workspace::new(&self.layers);
        self.forward_ws(x, &mut ws);
        ws.acts.pop().unwrap()
    }

    /// Scores projected onto `[1/C, C]`.
    pub fn forward_clipped(&self, x: &[usize]) -> Vec<f64> {
        let mut v = self.forward_raw(x);
        v.iter_mut().for_each(|s| *s = clip_value(*s, self.clip));
        v
    }

    /// Score-entropy loss on raw outputs and its exact gradient.
    ///
    /// `states` is a flat `batch x d` array of coordinates, `targets` a flat
    /// `batch x d(S-1)` array of ratio targets.
    pub fn loss_grad(&self, states: &[usize], targets: &[f64]) -> Result<(f64, GradBundle)> {
        let d = self.space.dims();
        let m = self.space.n_alternatives();
        if states.is_empty() || !states.len().is_multiple_of(d) || targets.len() != states.len() / d * m {
            return Err(Error::Shape(format!(
                "batch of {} coordinates and {} targets",
                states.len(),
                targets.len()
            )));
        }
        let batch = states.len() / d;
        let scale = 1.0 / (batch as f64 * self.space.symbols() as f64);
        let mut grad = GradBundle {
            layers: self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect(),
        };
        // The input depends on the state only, and the loss is linear in the
        // targets, so samples sharing a state collapse to one pass weighted by
        // their count and summed targets.
        let mut slots: HashMap<&[usize], usize> = HashMap::new();
        let mut distinct: Vec<&[usize]> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for (x, r) in states.chunks_exact(d).zip(targets.chunks_exact(m)) {
            let slot = *slots.entry(x).or_insert_with(|| {
                distinct.push(x);
                counts.push(0.0);
                sums.extend(std::iter::repeat_n(0.0, m));
                distinct.len() - 1
            });
            counts[slot] += 1.0;
            for (acc, &rt) in sums[slot * m..(slot + 1) * m].iter_mut().zip(r) {
                *acc += rt;
            }
        }
        let mut ws = Workspace::new(&self.layers);
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        for (slot, x) in distinct.iter().enumerate() {
            let count = counts[slot];
            let r = &sums[slot * m..(slot + 1) * m];
            self.forward_ws(x, &mut ws);
            let out = &ws.acts[last + 1];
            // loss term: n s - (Σr) log s with s = exp(z); d/dz = n s - Σr
            for ((delta, &s), &rt) in ws.deltas[last].iter_mut().zip(out).zip(r) {
                loss += count * s - rt * s.ln();
                *delta = (count * s - rt) * scale;
            }
            for l in (0..=last).rev() {
                let layer = &self.layers[l];
                let g = &mut grad.layers[l];
                let input = &ws.acts[l];
                {
                    let delta = &ws.deltas[l];
                    for (o, &dv) in delta.iter().enumerate() {
                        g.bias[o] += dv;
                        let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                        for (gw, &xv) in row.iter_mut().zip(input) {
                            *gw += dv * xv;
                        }
                    }
                }
                if l > 0 {
                    let (lower, upper) = ws.deltas.split_at_mut(l);
                    let delta = &upper[0];
                    let prev = &mut lower[l - 1];
                    for (j, p) in prev.iter_mut().enumerate() {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(o, &dv)| dv * layer.weights[o * layer.n_in + j])
                            .sum();
                        // tanh' = 1 - a^2
                        let a = input[j];
                        *p = back * (1.0 - a * a);
                    }
                }
            }
        }
        Ok((loss * scale, grad))
    }

    /// Loss only (no gradient).
    pub fn loss(&self, states: &[usize], targets: &[f64]) -> Result<f64> {
        let d = self.space.dims();
        let m = self.space.n_alternatives();
        if states.is_empty() || !states.len().is_multiple_of(d) || targets.len() != states.len() / d * m {
            return Err(Error::Shape("batch shape mismatch".into()));
        }
        let batch = states.len() / d;
        let mut ws = Workspace::new(&self.layers);
        let mut loss = 0.0;
        for (x, r) in states.chunks_exact(d).zip(targets.chunks_exact(m)) {
            self.forward_ws(x, &mut ws);
            loss += crate::bregman::se_term(ws.acts.last().unwrap(), r);
        }
        Ok(loss / (batch as f64 * self.space.symbols() as f64))
    }

    /// `θ ← θ - η g`.
    pub fn sgd_step(&mut self, grad: &GradBundle, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate {lr}")));
        }
        if grad.layers.len() != self.layers.len()
            || grad
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(Error::Shape("gradient does not match network".into()));
        }
        if !grad.is_finite() {
            return Err(Error::InvalidParameter("non-finite gradient".into()));
        }
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let u32le = |v: usize| -> Result<[u8; 4]> {
            u32::try_from(v)
                .map(|x| x.to_le_bytes())
                .map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))
        };
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&u32le(self.space.symbols())?)?;
        w.write_all(&u32le(self.space.dims())?)?;
        w.write_all(&u32le(self.meta.n_intervals)?)?;
        w.write_all(&u32le(self.meta.interval)?)?;
        w.write_all(&u32le(self.layers.len())?)?;
        for width in self.widths() {
            w.write_all(&u32le(width)?)?;
        }
        w.write_all(&self.clip.to_le_bytes())?;
        w.write_all(&self.meta.seed.to_le_bytes())?;
        w.write_all(&self.meta.query_time.to_le_bytes())?;
        let params = self.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
            Ok(b)
        }
        let read_u32 = |r: &mut R| -> Result<usize> { Ok(u32::from_le_bytes(take::<4, R>(r)?) as usize) };
        if &take::<8, R>(r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let symbols = read_u32(r)?;
        let dims = read_u32(r)?;
        let n_intervals = read_u32(r)?;
        let interval = read_u32(r)?;
        let n_layers = read_u32(r)?;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let widths = (0..=n_layers).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let clip = f64::from_le_bytes(take::<8, R>(r)?);
        let seed = u64::from_le_bytes(take::<8, R>(r)?);
        let query_time = f64::from_le_bytes(take::<8, R>(r)?);
        let n_params = u64::from_le_bytes(take::<8, R>(r)?) as usize;
        let space = StateSpace::new(symbols, dims)?;
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if n_params != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {n_params} does not match widths ({expected})"
            )));
        }
        let params = (0..n_params)
            .map(|_| Ok(f64::from_le_bytes(take::<8, R>(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let mut net = Self::from_layers(
            space,
            layers,
            clip,
            NetMeta {
                interval,
                n_intervals,
                query_time,
                seed,
            },
        )?;
        net.set_params(&params)?;
        Ok(net)
    }
}

impl ScoreModel for ScoreNet {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn scores_into(&self, x: &[usize], out: &mut [f64]) {
        let mut ws = Workspace::new(&self.layers);
        self.forward_ws(x, &mut ws);
        for (o, &v) in out.iter_mut().zip(ws.acts.last().unwrap()) {
            *o = clip_value(v, self.clip);
        }
    }

    fn clip_bound(&self) -> Option<f64> {
        Some(self.clip)
    }
}

/// Raw (unclipped) view of a network.
pub struct RawScores<'a>(pub &'a ScoreNet);

impl ScoreModel for RawScores<'_> {
    fn space(&self) -> StateSpace {
        self.0.space
    }

    fn scores_into(&self, x: &[usize], out: &mut [f64]) {
        let mut ws = Workspace::new(&self.0.layers);
        self.0.forward_ws(x, &mut ws);
        out.copy_from_slice(ws.acts.last().unwrap());
    }
}
