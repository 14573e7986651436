//! Fully-Bayesian non-stationary Gaussian process surrogate.
//!
//! The response is a zero-mean GP with a Gibbs product kernel whose
//! per-dimension signal and lengthscale are log-normal latent GPs over the
//! corresponding input coordinate. Each latent GP has a constant mean, an
//! amplitude and a scale. The response values at the designs are integrated
//! out analytically, so a posterior draw consists of the latent fields at the
//! designs plus the latent hyperparameters.

mod density;
mod kernel;
mod predict;

pub use density::{log_unnormalized_posterior, NsgpTarget, ParamLayout};
pub use kernel::{gibbs_covariance, gibbs_covariance_with, latent_se_covariance, GibbsForm};
pub use predict::{LocalFields, PosteriorSample};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignSpace;
use crate::error::{BodeError, Result};

/// Default observation-noise variance.
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-6;

/// Relative nugget added to every latent-GP covariance, `v² (R + nugget I)`.
pub const LATENT_NUGGET: f64 = 1e-8;

/// Observed designs and responses with a fixed noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    designs: Vec<Vec<f64>>,
    observations: Vec<f64>,
    noise_variance: f64,
}

impl Dataset {
    pub fn new(designs: Vec<Vec<f64>>, observations: Vec<f64>, noise_variance: f64) -> Result<Self> {
        if designs.len() != observations.len() {
            return Err(BodeError::Argument(format!(
                "{} designs but {} observations",
                designs.len(),
                observations.len()
            )));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(BodeError::Domain(format!("noise variance must be positive, got {noise_variance}")));
        }
        if let Some(first) = designs.first() {
            let d = first.len();
            if d == 0 || designs.iter().any(|x| x.len() != d) {
                return Err(BodeError::Argument("designs must share a positive dimension".into()));
            }
        }
        if designs.iter().flatten().chain(&observations).any(|v| !v.is_finite()) {
            return Err(BodeError::Argument("designs and observations must be finite".into()));
        }
        Ok(Dataset { designs, observations, noise_variance })
    }

    pub fn empty(noise_variance: f64) -> Result<Self> {
        Dataset::new(Vec::new(), Vec::new(), noise_variance)
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn designs(&self) -> &[Vec<f64>] {
        &self.designs
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Checks every design against the bounds of `space`.
    pub fn check_within(&self, space: &DesignSpace) -> Result<()> {
        for (i, x) in self.designs.iter().enumerate() {
            if !space.contains(x) {
                return Err(BodeError::Argument(format!("design {i} lies outside the design space")));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if let Some(first) = self.designs.first() {
            if first.len() != x.len() {
                return Err(BodeError::Argument("design dimension mismatch".into()));
            }
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(BodeError::Argument("non-finite observation".into()));
        }
        self.designs.push(x);
        self.observations.push(y);
        Ok(())
    }

    /// Same designs with observations replaced.
    pub fn with_observations(&self, observations: Vec<f64>) -> Result<Self> {
        Dataset::new(self.designs.clone(), observations, self.noise_variance)
    }
}

/// Which latent field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Signal,
    Lengthscale,
}

/// Mean, amplitude and scale of one latent GP on a log field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentGpParams {
    pub mean: f64,
    pub amplitude: f64,
    pub scale: f64,
}

impl LatentGpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.scale > 0.0 && self.mean.is_finite()) {
            return Err(BodeError::Domain(format!(
                "latent GP needs positive amplitude and scale, got v={} l={}",
                self.amplitude, self.scale
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of all latent GPs, one pair per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentHyperparams {
    pub signal: Vec<LatentGpParams>,
    pub lengthscale: Vec<LatentGpParams>,
}

impl LatentHyperparams {
    pub fn dim(&self) -> usize {
        self.signal.len()
    }

    pub fn get(&self, field: Field, dim: usize) -> &LatentGpParams {
        match field {
            Field::Signal => &self.signal[dim],
            Field::Lengthscale => &self.lengthscale[dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal.len() != self.lengthscale.len() || self.signal.is_empty() {
            return Err(BodeError::Argument("hyperparameter dimension mismatch".into()));
        }
        self.signal.iter().chain(&self.lengthscale).try_for_each(|p| p.validate())
    }
}

/// Log-lengthscale and log-signal values at the designs (n × d each).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFieldValues {
    pub log_lengthscales: DMatrix<f64>,
    pub log_signals: DMatrix<f64>,
}

impl LatentFieldValues {
    /// Constant fields (every design has the same lengthscale and signal).
    pub fn constant(n: usize, d: usize, log_signal: f64, log_lengthscale: f64) -> Self {
        LatentFieldValues {
            log_lengthscales: DMatrix::from_element(n, d, log_lengthscale),
            log_signals: DMatrix::from_element(n, d, log_signal),
        }
    }

    pub fn column(&self, field: Field, dim: usize) -> Vec<f64> {
        let m = match field {
            Field::Signal => &self.log_signals,
            Field::Lengthscale => &self.log_lengthscales,
        };
        m.column(dim).iter().copied().collect()
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        let shapes_ok = self.log_lengthscales.shape() == (n, d) && self.log_signals.shape() == (n, d);
        if !shapes_ok {
            return Err(BodeError::Argument(format!("latent fields must be {n}x{d}")));
        }
        if self.log_lengthscales.iter().chain(self.log_signals.iter()).any(|v| !v.is_finite()) {
            return Err(BodeError::Domain("latent field values must be finite".into()));
        }
        Ok(())
    }
}

/// Prior on the constant mean of the log-signal latent GP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalMeanPrior {
    /// Held at a constant; not sampled.
    Fixed { value: f64 },
    /// Sampled with a Gaussian prior of the given mean and variance.
    Normal { mean: f64, variance: f64 },
}

/// Hyperpriors of the latent GPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperpriorConfig {
    /// Constant mean of every log-lengthscale GP (fixed, not sampled).
    pub lengthscale_field_mean: f64,
    pub signal_field_mean: SignalMeanPrior,
    /// Gamma prior on latent amplitudes and scales.
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl HyperpriorConfig {
    /// Defaults used for the benchmarks: one-dimensional problems get a
    /// log-lengthscale mean of -2 and a N(0, 4) prior on the log-signal mean,
    /// higher-dimensional problems fix both means at 0.
    pub fn for_dim(d: usize) -> Self {
        if d == 1 {
            HyperpriorConfig {
                lengthscale_field_mean: -2.0,
                signal_field_mean: SignalMeanPrior::Normal { mean: 0.0, variance: 4.0 },
                gamma_shape: 1.0,
                gamma_rate: 1.0,
            }
        } else {
            HyperpriorConfig {
                lengthscale_field_mean: 0.0,
                signal_field_mean: SignalMeanPrior::Fixed { value: 0.0 },
                gamma_shape: 1.0,
                gamma_rate: 1.0,
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_shape > 0.0 && self.gamma_rate > 0.0) {
            return Err(BodeError::Domain("gamma prior parameters must be positive".into()));
        }
        if let SignalMeanPrior::Normal { variance, .. } = self.signal_field_mean {
            if !(variance > 0.0) {
                return Err(BodeError::Domain("signal-mean prior variance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Everything that defines the surrogate model apart from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsgpConfig {
    pub prior: HyperpriorConfig,
    pub gibbs_form: GibbsForm,
}

impl NsgpConfig {
    pub fn for_dim(d: usize) -> Self {
        NsgpConfig { prior: HyperpriorConfig::for_dim(d), gibbs_form: GibbsForm::Verbatim }
    }
}
