//! Bayesian global optimization of a noisy score with augmented expected
//! improvement over a stationary GP meta-model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::design::{lhs_with, DesignSpace};
use crate::error::{BodeError, Result};
use crate::linalg::jittered_cholesky;
use crate::rng::{stream_rng, Stream};

const N_RESTARTS: usize = 5;
const LOG_LENGTH_RANGE: (f64, f64) = (-4.6, 2.3);
const LOG_NOISE_RANGE: (f64, f64) = (-18.0, 0.0);
const LOG_SIGNAL_RANGE: (f64, f64) = (-7.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BgoConfig {
    pub n_init: usize,
    pub n_total: usize,
    pub n_candidates: usize,
    /// Stop once the best AEI falls below `tol` times the best observed score.
    pub tol: f64,
}

impl Default for BgoConfig {
    fn default() -> Self {
        BgoConfig { n_init: 10, n_total: 30, n_candidates: 500, tol: 1e-6 }
    }
}

impl BgoConfig {
    pub fn for_dim(d: usize) -> Self {
        BgoConfig { n_total: if d == 1 { 30 } else { 40 }, ..BgoConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.n_init >= self.n_total {
            return Err(BodeError::Argument(format!(
                "need 0 < n_init ({}) < n_total ({})",
                self.n_init, self.n_total
            )));
        }
        if self.n_candidates == 0 {
            return Err(BodeError::Argument("n_candidates must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(BodeError::Argument("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub max_aei: f64,
    /// Meta-model fit failed and a random candidate was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BgoTrace {
    pub points: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub sweeps: Vec<Sweep>,
    pub stopped_early: bool,
}

impl BgoTrace {
    /// Index of the first maximal score.
    pub fn best_index(&self) -> usize {
        observed_argmax(&self.scores)
    }
}

/// Index of the largest value; ties go to the first occurrence.
pub fn observed_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Maximizes `score` over `space` within `cfg.n_total` evaluations.
/// Returns the best evaluated point, its score and the full trace.
pub fn maximize<F>(score: F, space: &DesignSpace, cfg: &BgoConfig, seed: u64) -> Result<(Vec<f64>, f64, BgoTrace)>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Bgo, &[0]);
    let init = lhs_with(cfg.n_init, space, &mut rng);
    let init_scores = init.par_iter().map(|x| score(x)).collect::<Result<Vec<f64>>>()?;
    check_finite(&init_scores)?;
    let mut trace = BgoTrace { points: init, scores: init_scores, ..BgoTrace::default() };

    let mut sweep = 0u64;
    while trace.points.len() < cfg.n_total {
        sweep += 1;
        let mut rng = stream_rng(seed, Stream::Bgo, &[sweep]);
        let candidates = lhs_with(cfg.n_candidates, space, &mut rng);
        let unit: Vec<Vec<f64>> = trace.points.iter().map(|x| space.to_unit(x)).collect();
        let best = trace.scores[trace.best_index()];
        let flat = trace.scores.iter().all(|s| *s == trace.scores[0]);
        let fitted = if flat { None } else { Some(MetaModel::fit(&unit, &trace.scores, &mut rng)) };
        let (next, record) = match fitted {
            // constant observations predict no improvement anywhere
            None => (candidates[0].clone(), Sweep { max_aei: 0.0, fallback: false }),
            Some(Ok(model)) => {
                let aei: Vec<f64> = candidates.iter().map(|c| model.aei(&space.to_unit(c), &unit)).collect();
                let k = observed_argmax(&aei);
                (candidates[k].clone(), Sweep { max_aei: aei[k], fallback: false })
            }
            Some(Err(_)) => {
                let k = rng.random_range(0..candidates.len());
                (candidates[k].clone(), Sweep { max_aei: f64::NAN, fallback: true })
            }
        };
        let stop = !record.fallback && record.max_aei < cfg.tol * best.abs().max(1e-12);
        trace.sweeps.push(record);
        if stop {
            trace.stopped_early = true;
            break;
        }
        let y = score(&next)?;
        check_finite(&[y])?;
        trace.points.push(next);
        trace.scores.push(y);
    }
    let k = trace.best_index();
    Ok((trace.points[k].clone(), trace.scores[k], trace))
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().any(|y| !y.is_finite()) {
        return Err(BodeError::Domain("score function returned a non-finite value".into()));
    }
    Ok(())
}

/// Stationary squared-exponential GP on unit-scaled inputs and standardized
/// outputs with learned noise.
struct MetaModel {
    scale: f64,
    lengths: Vec<f64>,
    signal: f64,
    noise: f64,
    alpha: DVector<f64>,
    chol_l: DMatrix<f64>,
    train: Vec<Vec<f64>>,
}

fn se(x: &[f64], y: &[f64], lengths: &[f64], signal: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).zip(lengths).map(|((a, b), l)| (a - b) * (a - b) / (l * l)).sum();
    signal * (-0.5 * r2).exp()
}

fn clamp_params(theta: &[f64]) -> (Vec<f64>, f64, f64) {
    let d = theta.len() - 2;
    let lengths = theta[..d].iter().map(|v| v.clamp(LOG_LENGTH_RANGE.0, LOG_LENGTH_RANGE.1).exp()).collect();
    let signal = theta[d].clamp(LOG_SIGNAL_RANGE.0, LOG_SIGNAL_RANGE.1).exp();
    let noise = theta[d + 1].clamp(LOG_NOISE_RANGE.0, LOG_NOISE_RANGE.1).exp();
    (lengths, signal, noise)
}

fn covariance(x: &[Vec<f64>], lengths: &[f64], signal: f64, noise: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| se(&x[i], &x[j], lengths, signal) + if i == j { noise } else { 0.0 })
}

fn neg_log_marginal(theta: &[f64], x: &[Vec<f64>], y: &DVector<f64>) -> f64 {
    let (lengths, signal, noise) = clamp_params(theta);
    let k = covariance(x, &lengths, signal, noise);
    let Ok(chol) = jittered_cholesky(&k) else { return f64::INFINITY };
    let alpha = chol.solve(y);
    // soft penalty for leaving the box so the simplex is pulled back
    let penalty: f64 = theta
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (lo, hi) = if i < theta.len() - 2 {
                LOG_LENGTH_RANGE
            } else if i == theta.len() - 2 {
                LOG_SIGNAL_RANGE
            } else {
                LOG_NOISE_RANGE
            };
            (lo - v).max(0.0).powi(2) + (v - hi).max(0.0).powi(2)
        })
        .sum();
    0.5 * y.dot(&alpha) + 0.5 * chol.log_det() + penalty
}

impl MetaModel {
    fn fit<R: Rng + ?Sized>(x: &[Vec<f64>], y: &[f64], rng: &mut R) -> Result<Self> {
        let n = y.len();
        let (center, var) = crate::linalg::mean_and_variance(y);
        let scale = var.sqrt();
        if !(scale > 0.0) {
            return Err(BodeError::Argument("meta-model needs non-constant scores".into()));
        }
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - center) / scale));
        let d = x[0].len();
        let objective = |t: &[f64]| neg_log_marginal(t, x, &ys);
        let mut best: Option<(Vec<f64>, f64)> = None;
        for r in 0..N_RESTARTS {
            let start: Vec<f64> = if r == 0 {
                let mut s = vec![(0.2f64).ln(); d];
                s.push(0.0);
                s.push((1e-2f64).ln());
                s
            } else {
                let mut s: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..1.0)).collect();
                s.push(rng.random_range(-1.0..1.0));
                s.push(rng.random_range(-12.0..-1.0));
                s
            };
            let (t, f) = nelder_mead(&objective, &start, 0.5, 200 * (d + 2));
            if f.is_finite() && best.as_ref().is_none_or(|b| f < b.1) {
                best = Some((t, f));
            }
        }
        let (theta, _) = best.ok_or_else(|| BodeError::Argument("meta-model fit failed".into()))?;
        let (lengths, signal, noise) = clamp_params(&theta);
        let chol = jittered_cholesky(&covariance(x, &lengths, signal, noise))?;
        let alpha = chol.solve(&ys);
        Ok(MetaModel { scale, lengths, signal, noise, alpha, chol_l: chol.l(), train: x.to_vec() })
    }

    /// Latent predictive mean and standard deviation (standardized units).
    fn predict(&self, u: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.train.len(), self.train.iter().map(|t| se(u, t, &self.lengths, self.signal)));
        let mean = k.dot(&self.alpha);
        let v = self.chol_l.solve_lower_triangular(&k).expect("positive diagonal");
        let var = (self.signal - v.norm_squared()).max(0.0);
        (mean, var.sqrt())
    }

    /// AEI in the original score units.
    fn aei(&self, u: &[f64], evaluated: &[Vec<f64>]) -> f64 {
        let reference = evaluated
            .iter()
            .map(|e| {
                let (m, s) = self.predict(e);
                (m - s, m)
            })
            .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a })
            .1;
        let (m, s) = self.predict(u);
        let noise_sd = self.noise.sqrt();
        let ei = if s > 0.0 {
            let z = (m - reference) / s;
            let n = Normal::standard();
            ((m - reference) * n.cdf(z) + s * n.pdf(z)).max(0.0)
        } else {
            (m - reference).max(0.0)
        };
        let factor = 1.0 - noise_sd / (s * s + self.noise).sqrt();
        ei * factor.max(0.0) * self.scale
    }
}

/// Derivative-free Nelder–Mead minimization.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= 1e-10 * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect() };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let contracted = if fr < values[n] { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let k = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[k].clone(), values[k])
}
