//! Exact interpolation by a one-hidden-layer `tanh` network.
//!
//! Points are projected on a random direction `a`; hidden unit `k` switches
//! on between the `(k-1)`-th and `k`-th sorted projection. For large slope
//! `α` the activation matrix tends to a lower-triangular matrix of ones, so
//! doubling `α` eventually yields an invertible, well-conditioned system.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{Layer, NetMeta, ScoreNet};
use crate::score::{ScoreModel, ScoreTable};

const MAX_DIRECTION_DRAWS: usize = 64;
const ALPHA_CAP: f64 = (1u64 << 40) as f64;
const COND_LIMIT: f64 = 1e12;
const RESIDUAL_LIMIT: f64 = 1e-10;

/// `N_j(x) = c0_j + Σ_k c_{jk} tanh(α (a·x − b_k))`.
#[derive(Clone, Debug)]
pub struct Interpolant {
    pub direction: Vec<f64>,
    pub alpha: f64,
    pub breaks: Vec<f64>,
    /// `outputs x hidden`, row-major.
    pub coeffs: Vec<f64>,
    pub offsets: Vec<f64>,
    pub condition: f64,
}

impl Interpolant {
    pub fn n_hidden(&self) -> usize {
        self.breaks.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.offsets.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let t: f64 = self.direction.iter().zip(x).map(|(a, v)| a * v).sum();
        let hidden: Vec<f64> = self
            .breaks
            .iter()
            .map(|b| (self.alpha * (t - b)).tanh())
            .collect();
        self.offsets
            .iter()
            .zip(self.coeffs.chunks_exact(self.n_hidden().max(1)))
            .map(|(c0, row)| c0 + row.iter().zip(&hidden).map(|(c, h)| c * h).sum::<f64>())
            .collect()
    }

    /// Hidden and output affine layers, padded with inert units up to `width`.
    pub fn layers(&self, width: usize) -> Result<Vec<Layer>> {
        let n = self.n_hidden();
        if width < n {
            return Err(Error::Interpolation(format!(
                "width {width} is below the {n} points to interpolate"
            )));
        }
        let m = self.direction.len();
        let mut hidden = Layer {
            n_in: m,
            n_out: width,
            weights: vec![0.0; m * width],
            bias: vec![0.0; width],
        };
        for (k, b) in self.breaks.iter().enumerate() {
            for (w, a) in hidden.weights[k * m..(k + 1) * m].iter_mut().zip(&self.direction) {
                *w = self.alpha * a;
            }
            hidden.bias[k] = -self.alpha * b;
        }
        let p = self.n_outputs();
        let mut out = Layer {
            n_in: width,
            n_out: p,
            weights: vec![0.0; p * width],
            bias: self.offsets.clone(),
        };
        for j in 0..p {
            out.weights[j * width..j * width + n].copy_from_slice(&self.coeffs[j * n..(j + 1) * n]);
        }
        Ok(vec![hidden, out])
    }
}

fn draw_direction(points: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = points[0].len();
    let scale = points
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    for _ in 0..MAX_DIRECTION_DRAWS {
        let mut a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        a.iter_mut().for_each(|v| *v /= norm);
        let proj: Vec<f64> = points
            .iter()
            .map(|x| a.iter().zip(x).map(|(u, v)| u * v).sum())
            .collect();
        let mut sorted = proj.clone();
        sorted.sort_by(f64::total_cmp);
        let min_gap = sorted
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if min_gap > 1e-9 * scale {
            return Ok((a, proj));
        }
    }
    Err(Error::Interpolation(format!(
        "no separating direction in {MAX_DIRECTION_DRAWS} draws"
    )))
}

/// Interpolates `values` (`n x p`, row-major per point) at distinct `points`.
pub fn construct_interpolant_multi(
    points: &[Vec<f64>],
    values: &[Vec<f64>],
    alpha_growth: f64,
    seed: u64,
) -> Result<Interpolant> {
    let n = points.len();
    if n == 0 || values.len() != n {
        return Err(Error::Interpolation(format!(
            "{} points and {} value rows",
            n,
            values.len()
        )));
    }
    let dim = points[0].len();
    let p = values[0].len();
    if dim == 0 || points.iter().any(|x| x.len() != dim) || values.iter().any(|v| v.len() != p) {
        return Err(Error::Shape("ragged points or values".into()));
    }
    if !(alpha_growth > 1.0) {
        return Err(Error::InvalidParameter(format!("alpha growth {alpha_growth}")));
    }
    for i in 0..n {
        for j in 0..i {
            if points[i] == points[j] {
                return Err(Error::Interpolation(format!("points {j} and {i} coincide")));
            }
        }
    }
    let offsets: Vec<f64> = (0..p)
        .map(|j| values.iter().map(|v| v[j]).sum::<f64>() / n as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (direction, proj) = if n == 1 {
        (vec![0.0; dim], vec![0.0])
    } else {
        draw_direction(points, &mut rng)?
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| proj[i].total_cmp(&proj[j]));
    let t: Vec<f64> = order.iter().map(|&i| proj[i]).collect();
    let gap0 = if n > 1 { t[1] - t[0] } else { 1.0 };
    let breaks: Vec<f64> = (0..n)
        .map(|k| {
            if k == 0 {
                t[0] - gap0 / 4.0
            } else {
                (t[k - 1] + 3.0 * t[k]) / 4.0
            }
        })
        .collect();
    let rhs = DMatrix::from_fn(n, p, |r, j| values[order[r]][j] - offsets[j]);

    let mut alpha = 1.0;
    let mut last_failure = String::from("alpha search did not run");
    while alpha <= ALPHA_CAP {
        // Rescaled activation ψ = (tanh + 1)/2 in [0, 1].
        let a_mat = DMatrix::from_fn(n, n, |r, k| ((alpha * (t[r] - breaks[k])).tanh() + 1.0) / 2.0);
        let sv = a_mat.clone().singular_values();
        let cond = sv.max() / sv.min();
        if cond.is_finite() && cond < COND_LIMIT {
            if let Some(sol) = a_mat.lu().solve(&rhs) {
                let mut coeffs = vec![0.0; p * n];
                let mut offs = offsets.clone();
                for j in 0..p {
                    for k in 0..n {
                        let ct = sol[(k, j)];
                        coeffs[j * n + k] = ct / 2.0;
                        offs[j] += ct / 2.0;
                    }
                }
                let interp = Interpolant {
                    direction: direction.clone(),
                    alpha,
                    breaks: breaks.clone(),
                    coeffs,
                    offsets: offs,
                    condition: cond,
                };
                let residual = max_residual(&interp, points, values);
                if residual < RESIDUAL_LIMIT {
                    return Ok(interp);
                }
                last_failure = format!("residual {residual:e} at alpha {alpha}");
            }
        } else {
            last_failure = format!("condition number {cond:e} at alpha {alpha}");
        }
        alpha *= alpha_growth;
    }
    Err(Error::Interpolation(format!("alpha cap reached; {last_failure}")))
}

/// Scalar-valued variant.
pub fn construct_interpolant(
    points: &[Vec<f64>],
    values: &[f64],
    alpha_growth: f64,
    seed: u64,
) -> Result<Interpolant> {
    let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    construct_interpolant_multi(points, &rows, alpha_growth, seed)
}

pub fn max_residual(interp: &Interpolant, points: &[Vec<f64>], values: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(values)
        .flat_map(|(x, v)| {
            interp
                .eval(x)
                .into_iter()
                .zip(v.iter().copied())
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Depth-2 network whose raw output equals `table` at every state.
///
/// The exponential output map means the interpolated quantity is `ln` of
/// the table. `width` must be at least the number of states.
pub fn realize_table(table: &ScoreTable, width: usize, clip: f64, meta: NetMeta) -> Result<ScoreNet> {
    let space = table.space();
    let n = space.n_states()?;
    let s = space.symbols();
    let d = space.dims();
    let mut coords = vec![0; d];
    let mut points = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for idx in 0..n {
        space.decode_into(idx, &mut coords);
        let mut x = vec![0.0; d * s + 1];
        for (i, &c) in coords.iter().enumerate() {
            x[i * s + c] = 1.0;
        }
        x[d * s] = meta.query_time;
        points.push(x);
        let row = table.row(idx);
        if let Some(j) = row.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::NonPositive {
                what: "score table",
                index: idx * row.len() + j,
                value: row[j],
            });
        }
        values.push(row.iter().map(|v| v.ln()).collect());
    }
    let interp = construct_interpolant_multi(&points, &values, 2.0, meta.seed)?;
    ScoreNet::from_layers(space, interp.layers(width)?, clip, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreModel;
    use crate::state::StateSpace;

    fn random_points(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn single_point_is_constant() {
        let it = construct_interpolant(&[vec![0.3, -2.0]], &[1.7], 2.0, 0).unwrap();
        assert_eq!(it.eval(&[0.3, -2.0]), vec![1.7]);
        assert!((it.eval(&[5.0, 5.0])[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn eight_points_in_r4() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = random_points(8, 4, &mut rng);
        let vals: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let it = construct_interpolant(&pts, &vals, 2.0, 1).unwrap();
        for (x, v) in pts.iter().zip(&vals) {
            assert!((it.eval(x)[0] - v).abs() < 1e-8);
        }
    }

    #[test]
    fn equal_values_give_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(6, 3, &mut rng);
        let it = construct_interpolant(&pts, &[0.25; 6], 2.0, 3).unwrap();
        assert!(it.coeffs.iter().all(|&c| c == 0.0));
        for x in &pts {
            assert_eq!(it.eval(x)[0], 0.25);
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let p = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(construct_interpolant(&p, &[0.0, 1.0], 2.0, 0).is_err());
        assert!(construct_interpolant(&[vec![1.0]], &[0.0, 1.0], 2.0, 0).is_err());
        assert!(construct_interpolant(&[], &[], 2.0, 0).is_err());
    }

    #[test]
    fn padded_layers_match_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(5, 2, &mut rng);
        let vals: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, -(i as f64)]).collect();
        let it = construct_interpolant_multi(&pts, &vals, 2.0, 0).unwrap();
        let layers = it.layers(9).unwrap();
        assert!(it.layers(4).is_err());
        for x in &pts {
            let mut h = vec![0.0; 9];
            for (k, hk) in h.iter_mut().enumerate() {
                let row = &layers[0].weights[k * 2..k * 2 + 2];
                *hk = (layers[0].bias[k] + row[0] * x[0] + row[1] * x[1]).tanh();
            }
            for j in 0..2 {
                let row = &layers[1].weights[j * 9..(j + 1) * 9];
                let out = layers[1].bias[j] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                assert!((out - it.eval(x)[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn realizes_arbitrary_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (s, d) in [(2, 1), (2, 3), (3, 2), (4, 2), (2, 4)] {
            let space = StateSpace::new(s, d).unwrap();
            let n = space.n_states().unwrap();
            let vals: Vec<f64> = (0..n * space.n_alternatives())
                .map(|_| rng.random_range(0.1..5.0))
                .collect();
            let table = ScoreTable::new(space, vals).unwrap();
            let meta = NetMeta {
                interval: 0,
                n_intervals: 1,
                query_time: 0.7,
                seed: 4,
            };
            let net = realize_table(&table, n + 3, 100.0, meta).unwrap();
            let raw = ScoreTable::from_model(&crate::net::RawScores(&net)).unwrap();
            for (a, b) in raw.values().iter().zip(table.values()) {
                assert!((a - b).abs() < 1e-8 * b.max(1.0), "{a} vs {b}");
            }
            assert_eq!(net.space(), ScoreModel::space(&table));
        }
    }
}
