//! Truncated Karhunen-Loève expansion of a conditional posterior GP via the
//! Nyström method, with closed-form conditioning on a hypothetical observation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::design::{lhs_with, DesignSpace};
use crate::error::{BodeError, Result};
use crate::nsgp::{LocalFields, PosteriorSample};
use crate::rng::{stream_rng, Stream};

/// Eigenvalues below this fraction of the largest are discarded.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Default truncation energy fraction.
pub const DEFAULT_BETA: f64 = 0.95;

/// Smallest `W` whose leading eigenvalues hold at least `beta` of the total.
/// `eigs` must be sorted in decreasing order.
pub fn truncation_count(eigs: &[f64], beta: f64) -> usize {
    let total: f64 = eigs.iter().sum();
    let mut acc = 0.0;
    for (i, e) in eigs.iter().enumerate() {
        acc += e;
        if acc >= beta * total {
            return i + 1;
        }
    }
    eigs.len()
}

#[derive(Debug, Clone)]
pub struct KleExpansion {
    sample: Arc<PosteriorSample>,
    quad_points: Vec<Vec<f64>>,
    quad_fields: LocalFields,
    /// `(K + σ² I)^{-1} K(X, Q)`, n × N.
    solved_cross: DMatrix<f64>,
    /// Retained `η_i`, decreasing.
    eigenvalues: Vec<f64>,
    /// Sum of all eigenvalues above the floor.
    total_energy: f64,
    /// `u_i / sqrt(λ̂_i)` columns, N × W: features are `c(x, Q) · basis`.
    basis: DMatrix<f64>,
    beta: f64,
}

impl KleExpansion {
    /// Builds the expansion from the conditional covariance on `quad_points`.
    pub fn build(sample: Arc<PosteriorSample>, quad_points: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        if quad_points.len() < 2 {
            return Err(BodeError::Argument("KLE needs at least two quadrature points".into()));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(BodeError::Argument(format!("truncation fraction must lie in (0, 1], got {beta}")));
        }
        let n_quad = quad_points.len();
        let quad_fields = sample.local_fields(&quad_points);
        let prior = sample.gram(&quad_points, &quad_fields);
        let cross = sample.cross_designs(&quad_points, &quad_fields);
        let solved_cross = sample.solve_cross(&cross);
        let mut cov = &prior - &cross * &solved_cross;
        cov = (&cov + cov.transpose()) * 0.5;

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..n_quad).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let largest = eig.eigenvalues[order[0]];
        let mean_prior_var = prior.diagonal().mean().max(f64::MIN_POSITIVE);
        if !(largest > EIGEN_FLOOR * mean_prior_var) {
            return Err(BodeError::DegeneratePosterior { largest: largest / n_quad as f64 });
        }
        let kept: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] >= EIGEN_FLOOR * largest).collect();
        let lambdas: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i]).collect();
        let etas: Vec<f64> = lambdas.iter().map(|l| l / n_quad as f64).collect();
        let w = truncation_count(&etas, beta);
        let total_energy = etas.iter().sum();
        let basis = DMatrix::from_fn(n_quad, w, |j, i| eig.eigenvectors[(j, kept[i])] / lambdas[i].sqrt());

        Ok(KleExpansion {
            sample,
            quad_points,
            quad_fields,
            solved_cross,
            eigenvalues: etas[..w].to_vec(),
            total_energy,
            basis,
            beta,
        })
    }

    /// Builds on a fresh Latin-hypercube quadrature.
    pub fn build_lhs(sample: Arc<PosteriorSample>, space: &DesignSpace, n_quad: usize, beta: f64, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Quadrature, &[n_quad as u64]);
        let pts = lhs_with(n_quad, space, &mut rng);
        KleExpansion::build(sample, pts, beta)
    }

    /// Expansion with no random part: every path is the predictive mean.
    pub fn mean_only(sample: Arc<PosteriorSample>, quad_points: Vec<Vec<f64>>) -> Self {
        let quad_fields = sample.local_fields(&quad_points);
        let cross = sample.cross_designs(&quad_points, &quad_fields);
        let solved_cross = sample.solve_cross(&cross);
        let n_quad = quad_points.len();
        KleExpansion {
            sample,
            quad_points,
            quad_fields,
            solved_cross,
            eigenvalues: Vec::new(),
            total_energy: 0.0,
            basis: DMatrix::zeros(n_quad, 0),
            beta: 1.0,
        }
    }

    pub fn sample(&self) -> &PosteriorSample {
        &self.sample
    }

    pub fn quad_points(&self) -> &[Vec<f64>] {
        &self.quad_points
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Number of retained terms `W`.
    pub fn retained(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn total_energy(&self) -> f64 {
        self.total_energy
    }

    /// Retained fraction of eigenvalue mass (1 for a mean-only expansion).
    pub fn energy_ratio(&self) -> f64 {
        if self.total_energy > 0.0 {
            self.eigenvalues.iter().sum::<f64>() / self.total_energy
        } else {
            1.0
        }
    }

    /// Predictive means `w(x)` and feature matrix `A` with
    /// `A[p, i] = sqrt(η_i) φ_i(x_p)`.
    pub fn features(&self, points: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let s = &self.sample;
        let fields = s.local_fields(points);
        let cross_x = s.cross_designs(points, &fields);
        let mean = s.mean_from_cross(&cross_x);
        if self.retained() == 0 {
            return (mean, DMatrix::zeros(points.len(), 0));
        }
        let k_pq = s.cross_prior(points, &fields, &self.quad_points, &self.quad_fields);
        let c_pq = k_pq - &cross_x * &self.solved_cross;
        (mean, c_pq * &self.basis)
    }

    pub fn mean_at(&self, x: &[f64]) -> f64 {
        self.features(std::slice::from_ref(&x.to_vec())).0[0]
    }

    /// `(φ_1(x), …, φ_W(x))`.
    pub fn eigenfunctions(&self, x: &[f64]) -> Vec<f64> {
        let (_, a) = self.features(&[x.to_vec()]);
        a.iter().zip(&self.eigenvalues).map(|(a, e)| a / e.sqrt()).collect()
    }

    /// Surrogate path `x ↦ w(x) + Σ ξ_i sqrt(η_i) φ_i(x)`.
    pub fn sample_path(&self, xi: &[f64]) -> Result<impl Fn(&[f64]) -> f64 + '_> {
        if xi.len() != self.retained() {
            return Err(BodeError::Argument(format!(
                "path needs {} coefficients, got {}",
                self.retained(),
                xi.len()
            )));
        }
        let xi = DVector::from_column_slice(xi);
        Ok(move |x: &[f64]| {
            let (mean, a) = self.features(&[x.to_vec()]);
            mean[0] + (a * &xi)[0]
        })
    }

    /// Posterior of the coefficients after observing `y_tilde` at `x`.
    pub fn condition_on_hypothetical(&self, x: &[f64], y_tilde: f64, noise_variance: f64) -> Result<HypotheticalPosterior> {
        let (mean, a) = self.features(&[x.to_vec()]);
        HypotheticalPosterior::new(a.row(0).transpose(), y_tilde - mean[0], noise_variance)
    }
}

/// Gaussian posterior `N(μ, Σ)` of the KLE coefficients given one
/// hypothetical observation, `Σ = I - a aᵀ / (σ² + aᵀa)`, `μ = a r / (σ² + aᵀa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypotheticalPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub features: DVector<f64>,
}

impl HypotheticalPosterior {
    /// `residual` is `ỹ - w(x̃)`.
    pub fn new(features: DVector<f64>, residual: f64, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(BodeError::Domain("noise variance must be positive".into()));
        }
        let aa = features.norm_squared();
        let denom = noise_variance + aa;
        let w = features.len();
        let covariance = DMatrix::identity(w, w) - &features * features.transpose() / denom;
        let mean = &features * (residual / denom);
        Ok(HypotheticalPosterior { mean, covariance, features })
    }

    /// Symmetric square root `Σ^{1/2} = I - c a aᵀ`.
    pub fn sqrt_covariance(&self, noise_variance: f64) -> DMatrix<f64> {
        let w = self.features.len();
        let c = sqrt_downdate_coefficient(self.features.norm_squared(), noise_variance);
        DMatrix::identity(w, w) - &self.features * self.features.transpose() * c
    }
}

/// `c` with `(I - c a aᵀ)² = I - a aᵀ / (σ² + aᵀa)`.
pub fn sqrt_downdate_coefficient(aa: f64, noise_variance: f64) -> f64 {
    let denom = noise_variance + aa;
    if aa == 0.0 {
        return 0.0;
    }
    1.0 / (denom * (1.0 + (noise_variance / denom).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsgp::{
        Dataset, LatentFieldValues, LatentGpParams, LatentHyperparams, NsgpConfig,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn stationary_sample(data: &Dataset, log_s: f64, log_l: f64) -> Arc<PosteriorSample> {
        let p = LatentGpParams { mean: log_s, amplitude: 0.5, scale: 0.5 };
        let hp = LatentHyperparams { signal: vec![p], lengthscale: vec![LatentGpParams { mean: log_l, ..p }] };
        let fields = LatentFieldValues::constant(data.len(), 1, log_s, log_l);
        Arc::new(PosteriorSample::new(data, hp, fields, NsgpConfig::for_dim(1)).unwrap())
    }

    fn toy_data() -> Dataset {
        Dataset::new(vec![vec![0.1], vec![0.45], vec![0.8]], vec![0.3, -0.5, 0.9], 1e-6).unwrap()
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncation_count(&[4.0, 3.0, 2.0, 1.0], 0.95), 4);
        assert_eq!(truncation_count(&[9.0, 0.5, 0.5], 0.9), 1);
        assert_eq!(truncation_count(&[4.0, 3.0, 2.0, 1.0], 0.7), 2);
    }

    #[test]
    fn prior_kernel_reconstruction() {
        let data = Dataset::empty(1e-6).unwrap();
        let s = stationary_sample(&data, 0.0, (0.3f64).ln());
        let kle = KleExpansion::build_lhs(s.clone(), &DesignSpace::unit(1), 200, 1.0 - 1e-12, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = vec![rng.random::<f64>()];
            let y = vec![rng.random::<f64>()];
            let (_, a) = kle.features(&[x.clone(), y.clone()]);
            let approx = a.row(0).dot(&a.row(1));
            let exact = crate::nsgp::gibbs_covariance(&x, &y, &[1.0], &[1.0], &[0.3], &[0.3]).unwrap();
            assert!((approx - exact).abs() <= 0.02 * exact.abs().max(1e-3), "{approx} vs {exact}");
        }
    }

    #[test]
    fn energy_ratio_meets_beta() {
        let s = stationary_sample(&toy_data(), 0.0, (0.2f64).ln());
        for beta in [0.5, 0.9, 0.95, 0.99] {
            let kle = KleExpansion::build_lhs(s.clone(), &DesignSpace::unit(1), 150, beta, 5).unwrap();
            assert!(kle.energy_ratio() >= beta);
            assert!(kle.eigenvalues().windows(2).all(|w| w[0] >= w[1] && w[1] > 0.0));
        }
    }

    #[test]
    fn eigenfunctions_orthonormal_on_quadrature() {
        let s = stationary_sample(&toy_data(), 0.0, (0.2f64).ln());
        let kle = KleExpansion::build_lhs(s, &DesignSpace::unit(1), 120, 0.999, 7).unwrap();
        let n = kle.quad_points().len() as f64;
        let phis: Vec<Vec<f64>> = kle.quad_points().iter().map(|q| kle.eigenfunctions(q)).collect();
        let w = kle.retained();
        for i in 0..w {
            for k in 0..w {
                let ip: f64 = phis.iter().map(|p| p[i] * p[k]).sum::<f64>() / n;
                let expect = if i == k { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-6, "({i},{k}) {ip}");
            }
        }
    }

    #[test]
    fn zero_coefficients_give_mean_path_and_antithetic_average() {
        let s = stationary_sample(&toy_data(), 0.0, (0.2f64).ln());
        let kle = KleExpansion::build_lhs(s.clone(), &DesignSpace::unit(1), 100, 0.95, 2).unwrap();
        let w = kle.retained();
        let zero = kle.sample_path(&vec![0.0; w]).unwrap();
        let xi: Vec<f64> = (0..w).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
        let p = kle.sample_path(&xi).unwrap();
        let q = kle.sample_path(&neg).unwrap();
        for x in [0.0, 0.33, 0.62, 1.0] {
            let mean = s.conditional_predict(&[x]).unwrap().0;
            assert!((zero(&[x]) - mean).abs() < 1e-12);
            assert!((0.5 * (p(&[x]) + q(&[x])) - mean).abs() < 1e-12);
        }
        assert!(kle.sample_path(&vec![0.0; w + 1]).is_err());
    }

    #[test]
    fn path_variance_matches_spectral_sum() {
        let s = stationary_sample(&toy_data(), 0.0, (0.2f64).ln());
        let kle = KleExpansion::build_lhs(s.clone(), &DesignSpace::unit(1), 150, 0.99, 4).unwrap();
        let w = kle.retained();
        let x = [0.62];
        let spectral: f64 = kle.eigenfunctions(&x).iter().zip(kle.eigenvalues()).map(|(p, e)| e * p * p).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..2000)
            .map(|_| {
                let xi: Vec<f64> = (0..w).map(|_| rng.sample(StandardNormal)).collect();
                kle.sample_path(&xi).unwrap()(&x)
            })
            .collect();
        let var = crate::linalg::mean_and_variance(&vals).1;
        assert!((var - spectral).abs() <= 0.1 * spectral, "{var} vs {spectral}");
        let exact = s.conditional_predict(&x).unwrap().1;
        assert!(var <= 1.05 * exact, "{var} vs {exact}");
    }

    #[test]
    fn scalar_sherman_morrison() {
        let h = HypotheticalPosterior::new(DVector::from_vec(vec![2.0]), 1.0, 1.0).unwrap();
        assert!((h.covariance[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((h.mean[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_features_are_uninformative() {
        let h = HypotheticalPosterior::new(DVector::zeros(3), 5.0, 0.1).unwrap();
        assert_eq!(h.covariance, DMatrix::identity(3, 3));
        assert_eq!(h.mean, DVector::zeros(3));
    }

    #[test]
    fn rank_one_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let s2: f64 = rng.random_range(0.01..2.0);
            let h = HypotheticalPosterior::new(a.clone(), 0.3, s2).unwrap();
            let dense = (DMatrix::identity(3, 3) + &a * a.transpose() / s2).try_inverse().unwrap();
            assert!((h.covariance - dense).abs().max() < 1e-12);
        }
    }

    #[test]
    fn square_root_squares_to_covariance() {
        let a = DVector::from_vec(vec![0.4, -1.3, 2.2, 0.1]);
        let h = HypotheticalPosterior::new(a, 0.0, 0.05).unwrap();
        let r = h.sqrt_covariance(0.05);
        assert!((&r * &r - &h.covariance).abs().max() < 1e-12);
    }

    #[test]
    fn contraction_at_hypothetical_point() {
        let a = DVector::from_vec(vec![0.7, -0.2, 0.4]);
        let s2 = 0.03;
        let h = HypotheticalPosterior::new(a.clone(), 1.0, s2).unwrap();
        let aa = a.norm_squared();
        let post = (a.transpose() * &h.covariance * &a)[0];
        assert!(post < aa);
        assert!((post - s2 * aa / (s2 + aa)).abs() < 1e-14);
    }

    #[test]
    fn collapsed_posterior_is_degenerate() {
        // designs on every quadrature point with tiny noise
        let q: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let data = Dataset::new(q.clone(), vec![0.0; 6], 1e-14).unwrap();
        let s = stationary_sample(&data, 0.0, (0.3f64).ln());
        assert!(matches!(KleExpansion::build(s.clone(), q.clone(), 0.95), Err(BodeError::DegeneratePosterior { .. })));
        let m = KleExpansion::mean_only(s, q);
        assert_eq!(m.retained(), 0);
        assert_eq!(m.sample_path(&[]).unwrap()(&[0.5]), m.mean_at(&[0.5]));
    }
}
