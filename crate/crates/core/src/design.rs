//! Design spaces and Latin-hypercube designs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BodeError, Result};
use crate::rng::{stream_rng, Stream};

/// Axis-aligned box of admissible inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    bounds: Vec<(f64, f64)>,
}

impl DesignSpace {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(BodeError::Argument("design space needs at least one dimension".into()));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(BodeError::Argument(format!(
                    "dimension {i}: lower bound {lo} must be below upper bound {hi}"
                )));
            }
        }
        Ok(DesignSpace { bounds })
    }

    pub fn unit(dim: usize) -> Self {
        DesignSpace { bounds: vec![(0.0, 1.0); dim.max(1)] }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(&t, &(lo, hi))| lo + t * (hi - lo))
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.bounds)
            .map(|(&v, &(lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }
}

/// Latin-hypercube design of `n` points drawn with `rng`.
///
/// Each dimension is cut into `n` equal strata and every stratum receives
/// exactly one point, placed uniformly at random inside it.
pub fn lhs_with<R: Rng + ?Sized>(n: usize, space: &DesignSpace, rng: &mut R) -> Vec<Vec<f64>> {
    let d = space.dim();
    let mut points = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for (j, &(lo, hi)) in space.bounds().iter().enumerate() {
        perm.shuffle(rng);
        for (i, p) in points.iter_mut().enumerate() {
            let u: f64 = rng.random();
            let t = (perm[i] as f64 + u) / n as f64;
            p[j] = (lo + t * (hi - lo)).min(hi);
        }
    }
    points
}

/// Seeded Latin-hypercube design.
pub fn lhs(n: usize, space: &DesignSpace, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::InitialDesign, &[n as u64]);
    lhs_with(n, space, &mut rng)
}
