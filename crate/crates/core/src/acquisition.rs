//! Acquisition functions: expected KL divergence on the QoI (EKLD), plus
//! uncertainty sampling and expected improvement baselines.
//!
//! EKLD conditions each KLE on a hypothetical observation in closed form. With
//! `Σ^{1/2} = I - c a aᵀ`, a conditioned path draw at the inner points is a
//! rank-one update of the matching prior path draw, so each candidate costs
//! one feature evaluation plus `O(P W)` work per posterior sample.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{BodeError, Result};
use crate::kle::{sqrt_downdate_coefficient, KleExpansion};
use crate::nsgp::PosteriorSample;
use crate::qoi::{qoi_of_values, QoiKind, QoiMoments, QoiSpec, VARIANCE_FLOOR};
use crate::rng::{stream_rng, Stream};

/// `ln(σ1/σ2) + σ2²/(2σ1²) + (μ2-μ1)²/(2σ1²) - 1/2`.
pub fn kld_gaussians(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(BodeError::Domain(format!("standard deviations must be positive, got {sigma1} and {sigma2}")));
    }
    let r = sigma2 / sigma1;
    let d = (mu2 - mu1) / sigma1;
    // -ln r + r²/2 - 1/2 ≥ 0 analytically; clamp round-off
    Ok((-r.ln() + 0.5 * r * r - 0.5 + 0.5 * d * d).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acquisition {
    Ekld,
    Us,
    Ei,
}

impl std::fmt::Display for Acquisition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Acquisition::Ekld => "ekld",
            Acquisition::Us => "us",
            Acquisition::Ei => "ei",
        })
    }
}

impl std::str::FromStr for Acquisition {
    type Err = BodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ekld" => Ok(Acquisition::Ekld),
            "us" => Ok(Acquisition::Us),
            "ei" => Ok(Acquisition::Ei),
            other => Err(BodeError::Argument(format!("unknown acquisition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkldConfig {
    /// Posterior samples M (the campaign thins HMC output to this many).
    pub m_posterior: usize,
    /// Hypothetical observations B per posterior sample.
    pub b_hypothetical: usize,
    /// Path draws S per moment estimate.
    pub s_paths: usize,
}

impl Default for EkldConfig {
    fn default() -> Self {
        EkldConfig { m_posterior: 50, b_hypothetical: 50, s_paths: 50 }
    }
}

impl EkldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_posterior < 2 || self.b_hypothetical < 2 || self.s_paths < 2 {
            return Err(BodeError::Argument("EKLD sample counts must all be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScore {
    pub value: f64,
    /// `Ĝ_{n,m}` per posterior sample.
    pub per_sample: Vec<f64>,
    /// Current QoI moments per posterior sample.
    pub prior_moments: Vec<QoiMoments>,
    /// Post-hypothetical moments per posterior sample, averaged over the
    /// hypothetical observations.
    pub posterior_moments: Vec<QoiMoments>,
}

/// Candidate-independent precomputation for one posterior sample.
struct Member {
    kle: Arc<KleExpansion>,
    /// Mean path at the inner points.
    w: DVector<f64>,
    /// `sqrt(η) φ` at the inner points, P × W.
    basis: DMatrix<f64>,
    /// Path coefficients shared by prior and conditioned draws, W × S.
    z: DMatrix<f64>,
    /// Prior paths at the inner points, P × S.
    paths: DMatrix<f64>,
    /// Per-path mean and unbiased variance over the inner points.
    path_mean: Vec<f64>,
    path_var: Vec<f64>,
    /// Hypothetical coefficient draws ξ_b, W × B, and noise draws ε_b.
    xi: DMatrix<f64>,
    eps: Vec<f64>,
    prior: QoiMoments,
}

/// EKLD scorer for one SDOE iteration; holds common random numbers so that
/// every candidate sees the same draws.
pub struct EkldEvaluator {
    members: Vec<Member>,
    spec: QoiSpec,
    cfg: EkldConfig,
    noise_variance: f64,
}

impl EkldEvaluator {
    pub fn new(
        expansions: &[Arc<KleExpansion>],
        spec: &QoiSpec,
        inner_points: &[Vec<f64>],
        cfg: &EkldConfig,
        seed: u64,
        iteration: u64,
    ) -> Result<Self> {
        if expansions.is_empty() {
            return Err(BodeError::Argument("EKLD needs at least one posterior sample".into()));
        }
        if inner_points.len() < 2 {
            return Err(BodeError::Argument("EKLD needs at least two inner points".into()));
        }
        if cfg.b_hypothetical == 0 || cfg.s_paths < 2 {
            return Err(BodeError::Argument("EKLD needs B ≥ 1 and S ≥ 2".into()));
        }
        spec.validate()?;
        let noise_variance = expansions[0].sample().noise_variance();
        let members = expansions
            .par_iter()
            .enumerate()
            .map(|(m, kle)| Member::new(kle.clone(), spec, inner_points, cfg, seed, iteration, m as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(EkldEvaluator { members, spec: spec.clone(), cfg: *cfg, noise_variance })
    }

    /// Current QoI moments per posterior sample.
    pub fn prior_moments(&self) -> Vec<QoiMoments> {
        self.members.iter().map(|m| m.prior).collect()
    }

    /// QoI draws of every prior path, pooled over posterior samples.
    pub fn prior_draws(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.members {
            for s in 0..m.paths.ncols() {
                let mut v: Vec<f64> = m.paths.column(s).iter().copied().collect();
                out.push(qoi_of_values(self.spec.kind, self.spec.alpha, &mut v).expect("nonempty"));
            }
        }
        out
    }

    pub fn score(&self, x: &[f64]) -> Result<AcquisitionScore> {
        let parts: Vec<(f64, QoiMoments)> = self
            .members
            .iter()
            .map(|m| m.score(x, &self.spec, &self.cfg, self.noise_variance))
            .collect::<Result<_>>()?;
        let per_sample: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        Ok(AcquisitionScore {
            value,
            per_sample,
            prior_moments: self.prior_moments(),
            posterior_moments: parts.into_iter().map(|p| p.1).collect(),
        })
    }
}

impl Member {
    fn new(
        kle: Arc<KleExpansion>,
        spec: &QoiSpec,
        inner: &[Vec<f64>],
        cfg: &EkldConfig,
        seed: u64,
        iteration: u64,
        m: u64,
    ) -> Result<Self> {
        let (w, basis) = kle.features(inner);
        let wdim = kle.retained();
        let s = cfg.s_paths;
        let mut rng = stream_rng(seed, Stream::PathDraws, &[iteration, m]);
        let z = DMatrix::from_fn(wdim, s, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut paths = &basis * &z;
        for mut col in paths.column_iter_mut() {
            col += &w;
        }
        let mut xi = DMatrix::zeros(wdim, cfg.b_hypothetical);
        let mut eps = Vec::with_capacity(cfg.b_hypothetical);
        for b in 0..cfg.b_hypothetical {
            let mut rng = stream_rng(seed, Stream::Hypothetical, &[iteration, m, b as u64]);
            for k in 0..wdim {
                xi[(k, b)] = rng.sample(StandardNormal);
            }
            eps.push(rng.sample(StandardNormal));
        }
        let (path_mean, path_var): (Vec<f64>, Vec<f64>) = paths
            .column_iter()
            .map(|c| {
                let v: Vec<f64> = c.iter().copied().collect();
                crate::linalg::mean_and_variance(&v)
            })
            .unzip();
        let draws: Vec<f64> = (0..s)
            .map(|j| match spec.kind {
                QoiKind::Expectation => path_mean[j],
                QoiKind::Variance => path_var[j],
                kind => {
                    let mut v: Vec<f64> = paths.column(j).iter().copied().collect();
                    qoi_of_values(kind, spec.alpha, &mut v).expect("nonempty")
                }
            })
            .collect();
        let prior = QoiMoments::from_draws(&draws);
        Ok(Member { kle, w, basis, z, paths, path_mean, path_var, xi, eps, prior })
    }

    /// `Ĝ_{n,m}(x)` and the average post-hypothetical moments.
    fn score(&self, x: &[f64], spec: &QoiSpec, cfg: &EkldConfig, noise_variance: f64) -> Result<(f64, QoiMoments)> {
        let (_, a_row) = self.kle.features(&[x.to_vec()]);
        let a: DVector<f64> = a_row.row(0).transpose();
        let aa = a.norm_squared();
        let denom = noise_variance + aa;
        let c = sqrt_downdate_coefficient(aa, noise_variance);
        let sigma = noise_variance.sqrt();
        let s = cfg.s_paths;
        let p = self.w.len() as f64;

        let g = &self.basis * &a;
        let t = self.z.tr_mul(&a);
        let proj = self.xi.tr_mul(&a);

        let g_mean = g.mean();
        let (g_var, path_cov) = if spec.kind == QoiKind::Variance {
            let gc = g.add_scalar(-g_mean);
            let gv = gc.norm_squared() / (p - 1.0);
            let cov: Vec<f64> = (0..s).map(|j| self.paths.column(j).dot(&gc) / (p - 1.0)).collect();
            (gv, cov)
        } else {
            (0.0, Vec::new())
        };

        let sigma1 = self.prior.std_dev();
        let mut kld_sum = 0.0;
        let mut post_mean_sum = 0.0;
        let mut post_var_sum = 0.0;
        let mut draws = vec![0.0; s];
        let mut scratch = vec![0.0; self.w.len()];
        for b in 0..cfg.b_hypothetical {
            let kappa = (proj[b] + sigma * self.eps[b]) / denom;
            for j in 0..s {
                let delta = kappa - c * t[j];
                draws[j] = match spec.kind {
                    QoiKind::Expectation => self.path_mean[j] + g_mean * delta,
                    QoiKind::Variance => self.path_var[j] + 2.0 * delta * path_cov[j] + delta * delta * g_var,
                    kind => {
                        for (k, v) in scratch.iter_mut().enumerate() {
                            *v = self.paths[(k, j)] + g[k] * delta;
                        }
                        qoi_of_values(kind, spec.alpha, &mut scratch)?
                    }
                };
            }
            let post = QoiMoments::from_draws(&draws);
            kld_sum += kld_gaussians(self.prior.mean, sigma1, post.mean, post.std_dev())?;
            post_mean_sum += post.mean;
            post_var_sum += post.variance;
        }
        let nb = cfg.b_hypothetical as f64;
        Ok((
            kld_sum / nb,
            QoiMoments { mean: post_mean_sum / nb, variance: (post_var_sum / nb).max(VARIANCE_FLOOR), n_paths: s },
        ))
    }
}

/// One-shot EKLD score at `x`; builds a throwaway evaluator.
pub fn ekld_score(
    x: &[f64],
    expansions: &[Arc<KleExpansion>],
    spec: &QoiSpec,
    inner_points: &[Vec<f64>],
    cfg: &EkldConfig,
    seed: u64,
) -> Result<AcquisitionScore> {
    EkldEvaluator::new(expansions, spec, inner_points, cfg, seed, 0)?.score(x)
}

/// Mean predictive variance over posterior samples.
pub fn us_score(x: &[f64], posterior: &[impl AsRef<PosteriorSample>]) -> Result<f64> {
    if posterior.is_empty() {
        return Err(BodeError::Argument("uncertainty sampling needs a posterior sample".into()));
    }
    let mut acc = 0.0;
    for s in posterior {
        acc += s.as_ref().conditional_predict(x)?.1;
    }
    Ok(acc / posterior.len() as f64)
}

/// Closed-form expected improvement below `best` for `Y ~ N(mean, var)`.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    let gap = best - mean;
    if sd == 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    let n = Normal::standard();
    (gap * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

/// Expected improvement below `best`, averaged over posterior samples.
pub fn ei_score(x: &[f64], posterior: &[impl AsRef<PosteriorSample>], best: f64) -> Result<f64> {
    if posterior.is_empty() {
        return Err(BodeError::Argument("expected improvement needs a posterior sample".into()));
    }
    let mut acc = 0.0;
    for s in posterior {
        let (m, v) = s.as_ref().conditional_predict(x)?;
        acc += expected_improvement(m, v, best);
    }
    Ok(acc / posterior.len() as f64)
}
