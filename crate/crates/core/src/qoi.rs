//! Quantities of interest of a surrogate path over an input measure, and
//! Gaussian moment summaries of their predictive distribution.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{lhs_with, DesignSpace};
use crate::error::{BodeError, Result};
use crate::kle::KleExpansion;
use crate::rng::{stream_rng, Stream};

/// Lower bound applied to QoI variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QoiKind {
    Expectation,
    Variance,
    Minimum,
    Maximum,
    Percentile,
}

impl QoiKind {
    /// The QoI is a linear functional of the path.
    pub fn is_linear(self) -> bool {
        self == QoiKind::Expectation
    }
}

/// Measure the inner points are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputMeasure {
    /// Uniform over the design space, sampled by Latin hypercube.
    Uniform,
    /// An explicit equally weighted point set.
    Sample { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiSpec {
    pub kind: QoiKind,
    pub alpha: f64,
    pub measure: InputMeasure,
    pub n_inner: usize,
}

impl QoiSpec {
    pub fn new(kind: QoiKind) -> Self {
        QoiSpec { kind, alpha: 0.025, measure: InputMeasure::Uniform, n_inner: 2000 }
    }

    pub fn percentile(alpha: f64) -> Self {
        QoiSpec { alpha, ..QoiSpec::new(QoiKind::Percentile) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(BodeError::Argument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_inner < 2 {
            return Err(BodeError::Argument("n_inner must be at least 2".into()));
        }
        if let InputMeasure::Sample { points } = &self.measure {
            if points.len() < 2 {
                return Err(BodeError::Argument("explicit input measure needs at least two points".into()));
            }
        }
        Ok(())
    }

    /// Inner integration points, drawn once per campaign.
    pub fn inner_points(&self, space: &DesignSpace, seed: u64) -> Vec<Vec<f64>> {
        match &self.measure {
            InputMeasure::Uniform => {
                let mut rng = stream_rng(seed, Stream::InnerPoints, &[self.n_inner as u64]);
                lhs_with(self.n_inner, space, &mut rng)
            }
            InputMeasure::Sample { points } => points.clone(),
        }
    }
}

/// QoI of a path known through its values at the inner points.
/// `values` is used as scratch space and may be reordered.
pub fn qoi_of_values(kind: QoiKind, alpha: f64, values: &mut [f64]) -> Result<f64> {
    let n = values.len();
    if n == 0 {
        return Err(BodeError::Argument("QoI needs at least one inner point".into()));
    }
    Ok(match kind {
        QoiKind::Expectation => values.iter().sum::<f64>() / n as f64,
        QoiKind::Variance => crate::linalg::mean_and_variance(values).1,
        QoiKind::Minimum => values.iter().copied().fold(f64::INFINITY, f64::min),
        QoiKind::Maximum => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        QoiKind::Percentile => percentile_unsorted(values, alpha),
    })
}

/// Linear interpolation between order statistics at `h = (n-1) α`.
fn percentile_unsorted(values: &mut [f64], alpha: f64) -> f64 {
    let n = values.len();
    let h = (n - 1) as f64 * alpha;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// QoI of a callable path over fixed inner points.
pub fn eval_qoi(path: impl Fn(&[f64]) -> f64, spec: &QoiSpec, inner_points: &[Vec<f64>]) -> Result<f64> {
    if inner_points.is_empty() {
        return Err(BodeError::Argument("inner point set is empty".into()));
    }
    let mut values: Vec<f64> = inner_points.iter().map(|x| path(x)).collect();
    qoi_of_values(spec.kind, spec.alpha, &mut values)
}

/// Gaussian summary of a QoI's predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoiMoments {
    pub mean: f64,
    pub variance: f64,
    pub n_paths: usize,
}

impl QoiMoments {
    pub fn from_draws(draws: &[f64]) -> Self {
        let (mean, var) = crate::linalg::mean_and_variance(draws);
        QoiMoments { mean, variance: var.max(VARIANCE_FLOOR), n_paths: draws.len() }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// QoI values of `s_paths` independent KLE paths evaluated at the inner points.
pub fn qoi_draws<R: Rng + ?Sized>(
    exp: &KleExpansion,
    spec: &QoiSpec,
    inner_points: &[Vec<f64>],
    s_paths: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if inner_points.is_empty() {
        return Err(BodeError::Argument("inner point set is empty".into()));
    }
    let (mean, a) = exp.features(inner_points);
    let w = exp.retained();
    let z = DMatrix::from_fn(w, s_paths, |_, _| rng.sample::<f64, _>(StandardNormal));
    let paths = a * z;
    (0..s_paths)
        .map(|s| {
            let mut values: Vec<f64> = paths.column(s).iter().zip(mean.iter()).map(|(p, m)| p + m).collect();
            qoi_of_values(spec.kind, spec.alpha, &mut values)
        })
        .collect()
}

/// Sample mean and (floored) unbiased variance of the QoI over `s_paths` paths.
pub fn qoi_moments<R: Rng + ?Sized>(
    exp: &KleExpansion,
    spec: &QoiSpec,
    inner_points: &[Vec<f64>],
    s_paths: usize,
    rng: &mut R,
) -> Result<QoiMoments> {
    if s_paths < 2 {
        return Err(BodeError::Argument("need at least two paths for QoI moments".into()));
    }
    Ok(QoiMoments::from_draws(&qoi_draws(exp, spec, inner_points, s_paths, rng)?))
}
