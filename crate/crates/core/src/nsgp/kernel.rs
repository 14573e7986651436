use serde::{Deserialize, Serialize};

use crate::error::{BodeError, Result};

/// Normalization of the Gibbs prefactor.
///
/// `Verbatim` uses `sqrt(l l' / (l² + l'²))`, which gives `k(x, x) = Π s_i² / 2^{d/2}`.
/// `Normalized` uses `sqrt(2 l l' / (l² + l'²))`, the conventional form with
/// `k(x, x) = Π s_i²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GibbsForm {
    #[default]
    Verbatim,
    Normalized,
}

impl GibbsForm {
    #[inline]
    fn numerator_factor(self) -> f64 {
        match self {
            GibbsForm::Verbatim => 1.0,
            GibbsForm::Normalized => 2.0,
        }
    }
}

/// Gibbs product kernel between `x` and `x2` given the signal and lengthscale
/// values of every dimension at both points.
pub fn gibbs_covariance(
    x: &[f64],
    x2: &[f64],
    s: &[f64],
    s2: &[f64],
    l: &[f64],
    l2: &[f64],
) -> Result<f64> {
    gibbs_covariance_with(GibbsForm::Verbatim, x, x2, s, s2, l, l2)
}

pub fn gibbs_covariance_with(
    form: GibbsForm,
    x: &[f64],
    x2: &[f64],
    s: &[f64],
    s2: &[f64],
    l: &[f64],
    l2: &[f64],
) -> Result<f64> {
    let d = x.len();
    if [x2.len(), s.len(), s2.len(), l.len(), l2.len()].iter().any(|&n| n != d) {
        return Err(BodeError::Argument("kernel arguments must share the input dimension".into()));
    }
    if s.iter().chain(s2).chain(l).chain(l2).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(BodeError::Domain("signal and lengthscale values must be positive".into()));
    }
    Ok(gibbs_unchecked(form, x, x2, s, s2, l, l2))
}

/// Kernel evaluation without argument checks; used on hot paths.
#[inline]
pub(crate) fn gibbs_unchecked(
    form: GibbsForm,
    x: &[f64],
    x2: &[f64],
    s: &[f64],
    s2: &[f64],
    l: &[f64],
    l2: &[f64],
) -> f64 {
    let c = form.numerator_factor();
    let mut prefactor = 1.0;
    let mut exponent = 0.0;
    for i in 0..x.len() {
        let sum_sq = l[i] * l[i] + l2[i] * l2[i];
        let diff = x[i] - x2[i];
        prefactor *= s[i] * s2[i] * (c * l[i] * l2[i] / sum_sq).sqrt();
        exponent -= diff * diff / sum_sq;
    }
    prefactor * exponent.exp()
}

/// Derivative of `ln k(x_p, x_q)` with respect to `ln l_i(x_p)` for one
/// dimension, where `a = l_i(x_p)`, `b = l_i(x_q)` and `diff = x_pi - x_qi`.
/// Identical for both prefactor forms.
#[inline]
pub(crate) fn dlogk_dloglength(a: f64, b: f64, diff: f64) -> f64 {
    let a2 = a * a;
    let sum_sq = a2 + b * b;
    0.5 - a2 / sum_sq + 2.0 * a2 * diff * diff / (sum_sq * sum_sq)
}

/// Squared-exponential covariance of a latent log-field GP.
pub fn latent_se_covariance(t: f64, t2: f64, amplitude: f64, scale: f64) -> Result<f64> {
    if !(amplitude > 0.0 && scale > 0.0) {
        return Err(BodeError::Domain(format!(
            "latent covariance needs positive amplitude and scale, got v={amplitude} l={scale}"
        )));
    }
    let diff = t - t2;
    Ok(amplitude * amplitude * (-diff * diff / (2.0 * scale * scale)).exp())
}
