//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::state::{DistTable, StateSpace, StateVector};

pub const VALID_KEYS: &[&str] = &[
    "S",
    "d",
    "T",
    "h",
    "delta",
    "K",
    "lr",
    "batch",
    "epochs",
    "n_k",
    "n_data",
    "width",
    "depth",
    "clip",
    "smoothing",
    "p0",
    "dataset",
    "seed_dataset",
    "seed_train",
    "seed_sample",
    "samples",
    "sweep_n_k",
    "sweep_seeds",
    "sweep_batches",
];

/// Analytic data law.
#[derive(Clone, Debug, PartialEq)]
pub enum P0Spec {
    Uniform,
    Delta(Vec<usize>),
    /// One marginal per coordinate; a single marginal is broadcast.
    Product(Vec<Vec<f64>>),
    Table(PathBuf),
}

impl P0Spec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "uniform" {
            return Ok(Self::Uniform);
        }
        let (kind, rest) = text
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("p0 spec `{text}` has no kind prefix")))?;
        match kind {
            "delta" => Ok(Self::Delta(parse_list(rest, "p0 delta state")?)),
            "product" => {
                let marginals = rest
                    .split(';')
                    .map(|group| parse_list::<f64>(group, "p0 product marginal"))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self::Product(marginals))
            }
            "table" => Ok(Self::Table(PathBuf::from(rest.trim()))),
            other => Err(Error::Config(format!(
                "unknown p0 kind `{other}` (expected uniform, delta:, product:, table:)"
            ))),
        }
    }

    pub fn resolve(&self, space: StateSpace) -> Result<DistTable> {
        match self {
            Self::Uniform => space.stationary(),
            Self::Delta(x) => DistTable::delta(space, &StateVector(x.clone())),
            Self::Product(m) => {
                let marginals = if m.len() == 1 {
                    vec![m[0].clone(); space.dims()]
                } else {
                    m.clone()
                };
                DistTable::product(space, &marginals)
            }
            Self::Table(path) => read_table(space, path),
        }
    }
}

/// Whitespace- or comma-separated probabilities, `S^d` of them in state order.
pub fn read_table(space: StateSpace, path: &Path) -> Result<DistTable> {
    let text = std::fs::read_to_string(path)?;
    let probs = parse_list::<f64>(&text, "probability table")?;
    DistTable::new(space, probs)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|tok| !tok.is_empty())
        .map(|tok| {
            tok.parse::<T>()
                .map_err(|_| Error::Config(format!("{what}: cannot parse `{tok}`")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClipPolicy {
    /// `C = 1.5 B`.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub symbols: usize,
    pub dims: usize,
    pub horizon: f64,
    pub step: f64,
    pub delta: f64,
    pub intervals: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub n_k: usize,
    pub n_data: Option<usize>,
    pub width: usize,
    pub depth: usize,
    pub clip: ClipPolicy,
    pub smoothing: f64,
    pub p0: Option<P0Spec>,
    pub dataset: Option<PathBuf>,
    pub seed_dataset: u64,
    pub seed_train: u64,
    pub seed_sample: u64,
    pub samples: usize,
    pub sweep_n_k: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    /// When set, sweep cells use `ceil(n_k / sweep_batches)` as batch size.
    pub sweep_batches: Option<usize>,
    // T as given in the file; K is derived when absent.
    horizon_given: Option<f64>,
    intervals_given: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            symbols: 2,
            dims: 1,
            horizon: 1.0,
            step: 0.2,
            delta: 0.0,
            intervals: 5,
            lr: 1e-2,
            batch: 64,
            epochs: 10,
            n_k: 1024,
            n_data: None,
            width: 32,
            depth: 2,
            clip: ClipPolicy::Auto,
            smoothing: 1.0,
            p0: None,
            dataset: None,
            seed_dataset: 0,
            seed_train: 1,
            seed_sample: 2,
            samples: 10_000,
            sweep_n_k: Vec::new(),
            sweep_seeds: vec![0],
            sweep_batches: None,
            horizon_given: None,
            intervals_given: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Single override in `key=value` form.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "S" => self.symbols = parse_value(key, value)?,
            "d" => self.dims = parse_value(key, value)?,
            "T" => self.horizon_given = Some(parse_value(key, value)?),
            "h" => self.step = parse_value(key, value)?,
            "delta" => self.delta = parse_value(key, value)?,
            "K" => self.intervals_given = Some(parse_value(key, value)?),
            "lr" => self.lr = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "n_k" => self.n_k = parse_value(key, value)?,
            "n_data" => self.n_data = Some(parse_value(key, value)?),
            "width" => self.width = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "clip" => {
                self.clip = if value == "auto" {
                    ClipPolicy::Auto
                } else {
                    ClipPolicy::Fixed(parse_value(key, value)?)
                }
            }
            "smoothing" => self.smoothing = parse_value(key, value)?,
            "p0" => self.p0 = Some(P0Spec::parse(value)?),
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "seed_dataset" => self.seed_dataset = parse_value(key, value)?,
            "seed_train" => self.seed_train = parse_value(key, value)?,
            "seed_sample" => self.seed_sample = parse_value(key, value)?,
            "samples" => self.samples = parse_value(key, value)?,
            "sweep_n_k" => self.sweep_n_k = parse_list(value, key)?,
            "sweep_seeds" => self.sweep_seeds = parse_list(value, key)?,
            "sweep_batches" => self.sweep_batches = Some(parse_value(key, value)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        self.resolve_horizon()
    }

    fn resolve_horizon(&mut self) -> Result<()> {
        match (self.horizon_given, self.intervals_given) {
            (_, Some(k)) => {
                self.intervals = k;
                self.horizon = k as f64 * self.step + self.delta;
            }
            (Some(t), None) => {
                let k = ((t - self.delta) / self.step).round();
                if k >= 0.0 && k.is_finite() {
                    self.intervals = k as usize;
                }
                self.horizon = t;
            }
            (None, None) => self.horizon = self.intervals as f64 * self.step + self.delta,
        }
        Ok(())
    }

    pub fn space(&self) -> Result<StateSpace> {
        StateSpace::new(self.symbols, self.dims)
    }

    /// Checks every invariant; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.space()
            .map_err(|e| Error::Config(format!("keys `S`/`d`: {e}")))?;
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!("key `h` must be positive, got {}", self.step)));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("key `delta` must be nonnegative, got {}", self.delta)));
        }
        if self.intervals == 0 {
            return Err(Error::Config("key `K` must be at least 1".into()));
        }
        let t = self.intervals as f64 * self.step + self.delta;
        if (t - self.horizon).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "key `T`: T = {} but K h + delta = {t}",
                self.horizon
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("key `lr` must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("key `batch` must be at least 1".into()));
        }
        if self.n_k < self.batch {
            return Err(Error::Config(format!(
                "key `n_k` ({}) must be at least `batch` ({})",
                self.n_k, self.batch
            )));
        }
        if self.n_data == Some(0) {
            return Err(Error::Config("key `n_data` must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("key `width` must be at least 1".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config("key `depth` must be at least 2".into()));
        }
        if let ClipPolicy::Fixed(c) = self.clip {
            if !(c > 1.0) || !c.is_finite() {
                return Err(Error::Config(format!("key `clip` must exceed 1, got {c}")));
            }
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Config("key `smoothing` must be positive".into()));
        }
        if self.sweep_n_k.contains(&0) {
            return Err(Error::Config("key `sweep_n_k` entries must be positive".into()));
        }
        if self.sweep_batches == Some(0) {
            return Err(Error::Config("key `sweep_batches` must be at least 1".into()));
        }
        Ok(())
    }

    /// Dataset size: `n_data` when given, else `n_k`.
    pub fn dataset_size(&self) -> usize {
        self.n_data.unwrap_or(self.n_k)
    }

    /// Updates per interval: `E ceil(n_k / B)`.
    pub fn updates_per_interval(&self) -> usize {
        self.epochs * self.n_k.div_ceil(self.batch)
    }

    pub fn query_time(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.step + self.delta
    }

    /// Left end of interval `k`.
    pub fn interval_start(&self, k: usize) -> f64 {
        k as f64 * self.step + self.delta
    }

    /// Canonical `key = value` text that parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("S = {}", self.symbols),
            format!("d = {}", self.dims),
            format!("h = {}", self.step),
            format!("delta = {}", self.delta),
            format!("K = {}", self.intervals),
            format!("lr = {}", self.lr),
            format!("batch = {}", self.batch),
            format!("epochs = {}", self.epochs),
            format!("n_k = {}", self.n_k),
            format!("width = {}", self.width),
            format!("depth = {}", self.depth),
            match self.clip {
                ClipPolicy::Auto => "clip = auto".to_string(),
                ClipPolicy::Fixed(c) => format!("clip = {c}"),
            },
            format!("smoothing = {}", self.smoothing),
            format!("seed_dataset = {}", self.seed_dataset),
            format!("seed_train = {}", self.seed_train),
            format!("seed_sample = {}", self.seed_sample),
            format!("samples = {}", self.samples),
        ];
        if let Some(n) = self.n_data {
            lines.push(format!("n_data = {n}"));
        }
        if let Some(p0) = &self.p0 {
            let spec = match p0 {
                P0Spec::Uniform => "uniform".to_string(),
                P0Spec::Delta(x) => format!(
                    "delta:{}",
                    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
                ),
                P0Spec::Product(m) => format!(
                    "product:{}",
                    m.iter()
                        .map(|g| g.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                        .collect::<Vec<_>>()
                        .join(";")
                ),
                P0Spec::Table(p) => format!("table:{}", p.display()),
            };
            lines.push(format!("p0 = {spec}"));
        }
        if let Some(p) = &self.dataset {
            lines.push(format!("dataset = {}", p.display()));
        }
        if !self.sweep_n_k.is_empty() {
            let v: Vec<String> = self.sweep_n_k.iter().map(|v| v.to_string()).collect();
            lines.push(format!("sweep_n_k = {}", v.join(",")));
        }
        let v: Vec<String> = self.sweep_seeds.iter().map(|v| v.to_string()).collect();
        lines.push(format!("sweep_seeds = {}", v.join(",")));
        if let Some(b) = self.sweep_batches {
            lines.push(format!("sweep_batches = {b}"));
        }
        lines.join("\n") + "\n"
    }
}
