//! Minibatch SGD on the score-entropy loss, one network per interval.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bregman::se_minibatch_loss;
use crate::config::{ClipPolicy, RunConfig};
use crate::error::{Error, Result};
use crate::net::{widths_for, NetMeta, ScoreNet};
use crate::score::{ratio_targets_into, score_bound, smoothed_empirical, ScoreModel};
use crate::state::{corrupt_in_place, draw_from_cdf, DistTable, StateSpace, StateVector};

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Analytic,
    File(PathBuf),
}

/// `n` states stored as a flat `n x d` coordinate array.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    space: StateSpace,
    coords: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn from_states(space: StateSpace, states: &[StateVector], provenance: Provenance) -> Result<Self> {
        let mut coords = Vec::with_capacity(states.len() * space.dims());
        for x in states {
            space.validate(x)?;
            coords.extend_from_slice(&x.0);
        }
        Ok(Self {
            space,
            coords,
            provenance,
        })
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.space.dims()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[usize] {
        let d = self.space.dims();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    /// Enumeration indices of every sample.
    pub fn indices(&self) -> Vec<usize> {
        self.coords
            .chunks_exact(self.space.dims())
            .map(|x| self.space.encode(x))
            .collect()
    }

    /// One state per line, symbols separated by single spaces.
    pub fn to_text(&self) -> String {
        states_to_text(&self.coords, self.space.dims())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(space: StateSpace, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let states = parse_states(space, &text)?;
        Self::from_states(space, &states, Provenance::File(path.to_path_buf()))
    }
}

pub fn states_to_text(coords: &[usize], dims: usize) -> String {
    let mut out = String::with_capacity(coords.len() * 2);
    for x in coords.chunks_exact(dims) {
        for (i, c) in x.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses one state per line; blank lines are skipped.
pub fn parse_states(space: StateSpace, text: &str) -> Result<Vec<StateVector>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let x = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("line {}: bad symbol `{tok}`", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            let x = StateVector(x);
            space
                .validate(&x)
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            Ok(x)
        })
        .collect()
}

/// `n` i.i.d. draws by inverse CDF over the enumerated table.
pub fn draw_dataset<R: Rng + ?Sized>(p0: &DistTable, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be positive".into()));
    }
    let space = p0.space();
    let cdf = p0.cdf();
    let mut coords = vec![0; n * space.dims()];
    for x in coords.chunks_exact_mut(space.dims()) {
        space.decode_into(draw_from_cdf(&cdf, rng), x);
    }
    Ok(Dataset {
        space,
        coords,
        provenance: Provenance::Analytic,
    })
}

/// `(B, C)` from an analytic law with full support, else from the smoothed
/// empirical law of the dataset.
pub fn resolve_clip(p0: Option<&DistTable>, dataset: Option<&Dataset>, smoothing: f64) -> Result<(f64, f64)> {
    if let Some(p0) = p0 {
        if p0.first_zero().is_none() {
            let r = score_bound(p0)?;
            return Ok((r.bound, r.clip));
        }
    }
    let data = dataset.ok_or_else(|| {
        Error::InvalidParameter("clip bound needs a full-support law or a dataset".into())
    })?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let smoothed = smoothed_empirical(data.space(), &data.indices(), smoothing)?;
    let r = score_bound(&smoothed)?;
    Ok((r.bound, r.clip))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub k: usize,
    pub t: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,k,t_drawn,loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.epoch, r.k, r.t, r.loss).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Parse("training log header mismatch".into()));
        }
        let rows = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Parse(format!("bad log row `{l}`"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(LogRow {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    k: f[1].parse().map_err(|_| bad())?,
                    t: f[2].parse().map_err(|_| bad())?,
                    loss: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn for_interval(&self, k: usize) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.k == k)
    }
}

pub struct Trained {
    pub nets: Vec<ScoreNet>,
    pub log: TrainLog,
    pub score_bound: f64,
    pub clip: f64,
}

/// Per-interval RNG: one ChaCha stream per `k` under the training seed.
pub fn interval_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

fn init_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Fresh networks for every interval.
pub fn init_nets(cfg: &RunConfig, clip: f64) -> Result<Vec<ScoreNet>> {
    let space = cfg.space()?;
    let widths = widths_for(&space, cfg.width, cfg.depth);
    (0..cfg.intervals)
        .map(|k| {
            ScoreNet::init(
                space,
                &widths,
                clip,
                NetMeta {
                    interval: k,
                    n_intervals: cfg.intervals,
                    query_time: cfg.query_time(k),
                    seed: init_seed(cfg.seed_train, k),
                },
            )
        })
        .collect()
}

/// Minibatch of `(x_t, targets)` for interval `k`, with the drawn time.
pub struct Minibatch {
    pub t: f64,
    pub states: Vec<usize>,
    pub targets: Vec<f64>,
}

pub fn draw_minibatch<R: Rng + ?Sized>(
    dataset: &Dataset,
    cfg: &RunConfig,
    k: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Minibatch> {
    let space = dataset.space();
    let d = space.dims();
    let m = space.n_alternatives();
    // t uniform on (kh + δ, (k+1)h + δ]; the open left end keeps targets positive.
    let u: f64 = rng.random();
    let t = cfg.interval_start(k) + (1.0 - u) * cfg.step;
    let kernel = space.token_kernel(t)?;
    let mut states = vec![0; batch * d];
    let mut targets = vec![0.0; batch * m];
    let n = dataset.len();
    for (xt, r) in states.chunks_exact_mut(d).zip(targets.chunks_exact_mut(m)) {
        let x0 = dataset.sample(rng.random_range(0..n));
        xt.copy_from_slice(x0);
        corrupt_in_place(&kernel, xt, rng);
        ratio_targets_into(&kernel, x0, xt, r);
    }
    Ok(Minibatch { t, states, targets })
}

/// Runs SGD for interval `k` on `net`, appending one log row per update.
pub fn train_interval(
    net: &mut ScoreNet,
    dataset: &Dataset,
    cfg: &RunConfig,
    k: usize,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    let mut rng = interval_rng(cfg.seed_train, k);
    let per_epoch = cfg.n_k.div_ceil(cfg.batch);
    for epoch in 0..cfg.epochs {
        for b in 0..per_epoch {
            let mb = draw_minibatch(dataset, cfg, k, cfg.batch, &mut rng)?;
            let abort = |what: String| Error::NumericAbort {
                epoch,
                interval: k,
                batch: b,
                what,
            };
            let (loss, grad) = net.loss_grad(&mb.states, &mb.targets)?;
            if !loss.is_finite() {
                return Err(abort(format!("loss is {loss}")));
            }
            if !grad.is_finite() {
                return Err(abort("non-finite gradient".into()));
            }
            net.sgd_step(&grad, cfg.lr)?;
            log.push(LogRow {
                epoch,
                k,
                t: mb.t,
                loss,
            });
        }
    }
    Ok(())
}

/// Alg. 1 over all intervals. The log is ordered by `(k, epoch)`.
pub fn train(dataset: &Dataset, cfg: &RunConfig, p0: Option<&DistTable>) -> Result<Trained> {
    cfg.validate()?;
    if dataset.space() != cfg.space()? {
        return Err(Error::Config("dataset does not match keys `S`/`d`".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("key `dataset`: dataset is empty".into()));
    }
    let (bound, auto_clip) = resolve_clip(p0, Some(dataset), cfg.smoothing)?;
    let clip = match cfg.clip {
        ClipPolicy::Auto => auto_clip,
        ClipPolicy::Fixed(c) => c,
    };
    let mut nets = init_nets(cfg, clip)?;
    let mut rows = Vec::with_capacity(cfg.intervals * cfg.updates_per_interval());
    for (k, net) in nets.iter_mut().enumerate() {
        train_interval(net, dataset, cfg, k, &mut rows)?;
    }
    Ok(Trained {
        nets,
        log: TrainLog { rows },
        score_bound: bound,
        clip,
    })
}

/// Records minibatch losses of a fixed model without updating it.
pub fn frozen_losses<M: ScoreModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    cfg: &RunConfig,
    k: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let space = dataset.space();
    let m = space.n_alternatives();
    let mut rng = interval_rng(seed, k);
    let mut scores = vec![0.0; cfg.batch * m];
    (0..n_batches)
        .map(|_| {
            let mb = draw_minibatch(dataset, cfg, k, cfg.batch, &mut rng)?;
            for (x, out) in mb.states.chunks_exact(space.dims()).zip(scores.chunks_exact_mut(m)) {
                model.scores_into(x, out);
            }
            se_minibatch_loss(&scores, &mb.targets, m, space.symbols())
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("net_{k:04}.ckpt"))
}

pub fn write_checkpoints(dir: &Path, nets: &[ScoreNet]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, net) in nets.iter().enumerate() {
        net.write_checkpoint(&checkpoint_path(dir, k))?;
    }
    Ok(())
}

/// Loads `net_0000.ckpt ...` and checks that the headers agree.
pub fn read_checkpoints(dir: &Path) -> Result<Vec<ScoreNet>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Checkpoint(format!("no checkpoints in {}", dir.display())));
    }
    let nets = paths
        .iter()
        .map(|p| ScoreNet::read_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    check_consistent(&nets)?;
    Ok(nets)
}

pub fn check_consistent(nets: &[ScoreNet]) -> Result<()> {
    let first = &nets[0];
    let k_total = first.meta().n_intervals;
    if nets.len() != k_total {
        return Err(Error::Checkpoint(format!(
            "{} checkpoints for K = {k_total}",
            nets.len()
        )));
    }
    for (k, net) in nets.iter().enumerate() {
        if net.space() != first.space()
            || net.meta().n_intervals != k_total
            || net.clip() != first.clip()
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint {k} header disagrees with checkpoint 0"
            )));
        }
        if net.meta().interval != k {
            return Err(Error::Checkpoint(format!(
                "checkpoint {k} holds interval {}",
                net.meta().interval
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::expected_training_loss;
    use crate::score::true_score;

    fn smoke_cfg() -> RunConfig {
        RunConfig::from_text(
            "S=2\nd=1\nh=0.2\nK=5\nepochs=50\nn_k=1000\nbatch=100\nlr=0.05\nwidth=16\ndepth=2\np0=product:0.7,0.3",
        )
        .unwrap()
    }

    #[test]
    fn delta_dataset_is_constant() {
        let space = StateSpace::new(3, 2).unwrap();
        let p0 = DistTable::delta(space, &StateVector(vec![2, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = draw_dataset(&p0, 100, &mut rng).unwrap();
        assert!((0..100).all(|i| data.sample(i) == [2, 1]));
        assert!(draw_dataset(&p0, 0, &mut rng).is_err());
    }

    #[test]
    fn uniform_dataset_frequencies() {
        let space = StateSpace::new(2, 2).unwrap();
        let p0 = space.stationary().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let data = draw_dataset(&p0, n, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for i in data.indices() {
            counts[i] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 0.25 * n as f64).abs() < 3.0 * sigma);
        }
        let again = draw_dataset(&p0, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, data);
    }

    #[test]
    fn dataset_text_roundtrip() {
        let space = StateSpace::new(4, 3).unwrap();
        let p0 = space.stationary().unwrap();
        let data = draw_dataset(&p0, 50, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let states = parse_states(space, &data.to_text()).unwrap();
        let back = Dataset::from_states(space, &states, Provenance::Analytic).unwrap();
        assert_eq!(back, data);
        assert!(parse_states(space, "0 1 4\n").is_err());
    }

    #[test]
    fn resolve_clip_examples() {
        let s = StateSpace::new(2, 1).unwrap();
        let (b, c) = resolve_clip(Some(&s.stationary().unwrap()), None, 1.0).unwrap();
        assert_eq!((b, c), (1.0, 1.5));
        let p = DistTable::new(s, vec![0.8, 0.2]).unwrap();
        let (b, c) = resolve_clip(Some(&p), None, 1.0).unwrap();
        assert!((b - 4.0).abs() < 1e-12 && (c - 6.0).abs() < 1e-12);
        // Only state 0 observed: smoothing keeps the bound finite.
        let data = Dataset::from_states(s, &vec![StateVector(vec![0]); 9], Provenance::Analytic).unwrap();
        let (b, _) = resolve_clip(None, Some(&data), 1.0).unwrap();
        assert!((b - 10.0).abs() < 1e-12);
        let empty = Dataset::from_states(s, &[], Provenance::Analytic).unwrap();
        assert!(resolve_clip(None, Some(&empty), 1.0).is_err());
    }

    #[test]
    fn zero_epochs_leaves_init() {
        let mut cfg = smoke_cfg();
        cfg.epochs = 0;
        let space = cfg.space().unwrap();
        let p0 = cfg.p0.as_ref().unwrap().resolve(space).unwrap();
        let data = draw_dataset(&p0, 1000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = train(&data, &cfg, Some(&p0)).unwrap();
        let init = init_nets(&cfg, out.clip).unwrap();
        assert_eq!(out.nets, init);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_counts_updates() {
        let mut cfg = smoke_cfg();
        cfg.epochs = 3;
        let space = cfg.space().unwrap();
        let p0 = cfg.p0.as_ref().unwrap().resolve(space).unwrap();
        let data = draw_dataset(&p0, 1000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = train(&data, &cfg, Some(&p0)).unwrap();
        let b = train(&data, &cfg, Some(&p0)).unwrap();
        assert_eq!(a.nets, b.nets);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.rows.len(), cfg.intervals * cfg.updates_per_interval());
        for k in 0..cfg.intervals {
            assert_eq!(a.log.for_interval(k).count(), 3 * 10);
        }
        let back = TrainLog::parse_csv(&a.log.to_csv()).unwrap();
        assert_eq!(back, a.log);
    }

    #[test]
    fn smoke_training_descends() {
        let cfg = smoke_cfg();
        let space = cfg.space().unwrap();
        let p0 = cfg.p0.as_ref().unwrap().resolve(space).unwrap();
        let data = draw_dataset(&p0, 10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let out = train(&data, &cfg, Some(&p0)).unwrap();
        for k in 0..cfg.intervals {
            let init = init_nets(&cfg, out.clip).unwrap();
            let before = crate::bregman::population_se(&p0, &crate::net::RawScores(&init[k]), k, cfg.step, 0.0).unwrap();
            let after = crate::bregman::population_se(&p0, &crate::net::RawScores(&out.nets[k]), k, cfg.step, 0.0).unwrap();
            assert!(after < before, "k={k}: {after} >= {before}");
        }
    }

    #[test]
    fn frozen_oracle_loss_matches_population_value() {
        let cfg = RunConfig::from_text("S=3\nd=2\nh=0.25\nK=4\nbatch=256\nn_k=256\np0=product:0.5,0.3,0.2").unwrap();
        let space = cfg.space().unwrap();
        let p0 = cfg.p0.as_ref().unwrap().resolve(space).unwrap();
        let data = draw_dataset(&p0, 200_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for k in [0, 3] {
            let oracle = true_score(&p0, cfg.query_time(k)).unwrap();
            let losses = frozen_losses(&oracle, &data, &cfg, k, 400, 9).unwrap();
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (losses.len() - 1) as f64;
            let se = (var / losses.len() as f64).sqrt();
            let expect = expected_training_loss(&p0, &oracle, k, cfg.step, cfg.delta).unwrap();
            assert!((mean - expect).abs() < 4.0 * se + 1e-3, "k={k}: {mean} vs {expect} (se {se})");
        }
    }

    #[test]
    fn checkpoints_roundtrip_and_detect_mismatch() {
        let cfg = smoke_cfg();
        let nets = init_nets(&cfg, 2.0).unwrap();
        let dir = std::env::temp_dir().join(format!("discdiff-ckpt-{}", std::process::id()));
        write_checkpoints(&dir, &nets).unwrap();
        assert_eq!(read_checkpoints(&dir).unwrap(), nets);
        let mut other = nets[1].clone();
        other.set_clip(3.0);
        other.write_checkpoint(&checkpoint_path(&dir, 1)).unwrap();
        assert!(matches!(read_checkpoints(&dir), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
