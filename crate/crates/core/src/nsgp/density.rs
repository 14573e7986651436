use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::kernel::{dlogk_dloglength, gibbs_unchecked};
use super::{
    Dataset, Field, HyperpriorConfig, LatentFieldValues, LatentGpParams, LatentHyperparams, NsgpConfig,
    SignalMeanPrior, LATENT_NUGGET,
};
use crate::error::{BodeError, Result};
use crate::linalg::jittered_cholesky;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn normal_ln_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (LN_2PI + variance.ln() + (x - mean) * (x - mean) / variance)
}

fn sq_dist_matrix(coords: &[f64]) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |p, q| {
        let d = coords[p] - coords[q];
        d * d
    })
}

fn correlation(d2: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let inv = 1.0 / (2.0 * scale * scale);
    d2.map(|v| (-v * inv).exp())
}

fn with_nugget(r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = r.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += LATENT_NUGGET;
    }
    m
}

/// Collapsed log marginal likelihood `log N(y | 0, K(fields) + σ² I)` together
/// with `A = α αᵀ - (K + σ² I)^{-1}` and the kernel matrix (for gradients).
struct Likelihood {
    value: f64,
    a: DMatrix<f64>,
    k: DMatrix<f64>,
    length: DMatrix<f64>,
}

fn collapsed_likelihood(data: &Dataset, fields: &LatentFieldValues, config: &NsgpConfig, want_grad: bool) -> Result<Likelihood> {
    let n = data.len();
    let signal = fields.log_signals.map(f64::exp);
    let length = fields.log_lengthscales.map(f64::exp);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|p| (signal.row(p).iter().copied().collect(), length.row(p).iter().copied().collect()))
        .collect();
    let xs = data.designs();
    let mut k = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            let v = gibbs_unchecked(config.gibbs_form, &xs[p], &xs[q], &rows[p].0, &rows[q].0, &rows[p].1, &rows[q].1);
            k[(p, q)] = v;
            k[(q, p)] = v;
        }
    }
    let mut c = k.clone();
    for p in 0..n {
        c[(p, p)] += data.noise_variance();
    }
    let chol = jittered_cholesky(&c)?;
    let y = DVector::from_column_slice(data.observations());
    let alpha = chol.solve(&y);
    let value = -0.5 * y.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI;
    let a = if want_grad {
        let cinv = chol.chol.inverse();
        &alpha * alpha.transpose() - cinv
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(Likelihood { value, a, k, length })
}

/// Unnormalized log posterior of latent fields and hyperparameters with the
/// response values at the designs integrated out:
/// `log N(y | 0, K + σ² I) + Σ log N(u_{λ,i} | m_{λ,i} 1, K_{λ,i}) + log p(ψ)`.
///
/// Priors are placed on the amplitudes and scales themselves (no log-scale
/// Jacobian). The signal-field mean contributes its Gaussian prior only when it
/// is a sampled quantity.
pub fn log_unnormalized_posterior(
    data: &Dataset,
    fields: &LatentFieldValues,
    hyperparams: &LatentHyperparams,
    config: &NsgpConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(BodeError::Argument("log posterior needs at least one observation".into()));
    }
    hyperparams.validate()?;
    config.prior.validate()?;
    let d = hyperparams.dim();
    fields.validate(data.len(), d)?;
    let prior = &config.prior;

    let mut total = collapsed_likelihood(data, fields, config, false)?.value;
    for i in 0..d {
        let coords: Vec<f64> = data.designs().iter().map(|x| x[i]).collect();
        let d2 = sq_dist_matrix(&coords);
        for field in [Field::Signal, Field::Lengthscale] {
            let p = hyperparams.get(field, i);
            let cov = with_nugget(&correlation(&d2, p.scale)) * (p.amplitude * p.amplitude);
            let chol = jittered_cholesky(&cov)?;
            let resid = DVector::from_iterator(coords.len(), fields.column(field, i).into_iter().map(|u| u - p.mean));
            let w = chol.solve(&resid);
            total += -0.5 * resid.dot(&w) - 0.5 * chol.log_det() - 0.5 * coords.len() as f64 * LN_2PI;
            total += gamma_ln_pdf(p.amplitude, prior.gamma_shape, prior.gamma_rate);
            total += gamma_ln_pdf(p.scale, prior.gamma_shape, prior.gamma_rate);
        }
        if let SignalMeanPrior::Normal { mean, variance } = prior.signal_field_mean {
            total += normal_ln_pdf(hyperparams.signal[i].mean, mean, variance);
        }
    }
    Ok(total)
}

/// Layout of the unconstrained parameter vector sampled by HMC.
///
/// The latent fields are whitened: `u_{λ,i} = m_{λ,i} + v_{λ,i} chol(R(ℓ_{λ,i}) + nugget I) z_{λ,i}`
/// with `z ~ N(0, I)`. Layout: all signal `z` blocks (one per dimension,
/// length `n` each), then all lengthscale `z` blocks, then per dimension
/// `[m_signal (if sampled), ln v_signal, ln ℓ_signal, ln v_length, ln ℓ_length]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n: usize,
    pub d: usize,
    pub sample_signal_mean: bool,
}

impl ParamLayout {
    fn stride(&self) -> usize {
        4 + usize::from(self.sample_signal_mean)
    }

    pub fn len(&self) -> usize {
        2 * self.d * self.n + self.d * self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z_range(&self, field: Field, dim: usize) -> std::ops::Range<usize> {
        let block = match field {
            Field::Signal => dim,
            Field::Lengthscale => self.d + dim,
        };
        block * self.n..(block + 1) * self.n
    }

    fn hyper_base(&self, dim: usize) -> usize {
        2 * self.d * self.n + dim * self.stride()
    }

    pub fn signal_mean(&self, dim: usize) -> Option<usize> {
        self.sample_signal_mean.then(|| self.hyper_base(dim))
    }

    pub fn log_amplitude(&self, field: Field, dim: usize) -> usize {
        let off = usize::from(self.sample_signal_mean)
            + match field {
                Field::Signal => 0,
                Field::Lengthscale => 2,
            };
        self.hyper_base(dim) + off
    }

    pub fn log_scale(&self, field: Field, dim: usize) -> usize {
        self.log_amplitude(field, dim) + 1
    }

    /// Re-lays `theta` for `new_n ≥ n` designs; new whitened coordinates are 0.
    pub fn grow(&self, theta: &[f64], new_n: usize) -> Vec<f64> {
        let bigger = ParamLayout { n: new_n, ..*self };
        let mut out = vec![0.0; bigger.len()];
        for field in [Field::Signal, Field::Lengthscale] {
            for i in 0..self.d {
                let src = self.z_range(field, i);
                let dst = bigger.z_range(field, i);
                out[dst.start..dst.start + self.n].copy_from_slice(&theta[src]);
            }
        }
        let tail = 2 * self.d * self.n;
        out[2 * self.d * new_n..].copy_from_slice(&theta[tail..]);
        out
    }
}

/// Whitened HMC target for the non-stationary GP posterior.
#[derive(Debug, Clone)]
pub struct NsgpTarget {
    data: Dataset,
    config: NsgpConfig,
    layout: ParamLayout,
    coords: Vec<Vec<f64>>,
    sq_dists: Vec<DMatrix<f64>>,
}

struct LatentBlock {
    field: Field,
    dim: usize,
    mean: f64,
    amplitude: f64,
    scale: f64,
    r: DMatrix<f64>,
    l: DMatrix<f64>,
    z: DVector<f64>,
    u: DVector<f64>,
}

impl NsgpTarget {
    pub fn new(data: Dataset, config: NsgpConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(BodeError::Argument("HMC target needs at least one observation".into()));
        }
        config.prior.validate()?;
        let d = data.designs()[0].len();
        let layout = ParamLayout {
            n: data.len(),
            d,
            sample_signal_mean: matches!(config.prior.signal_field_mean, SignalMeanPrior::Normal { .. }),
        };
        let coords: Vec<Vec<f64>> = (0..d).map(|i| data.designs().iter().map(|x| x[i]).collect()).collect();
        let sq_dists = coords.iter().map(|c| sq_dist_matrix(c)).collect();
        Ok(NsgpTarget { data, config, layout, coords, sq_dists })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn config(&self) -> &NsgpConfig {
        &self.config
    }

    fn field_mean(&self, theta: &[f64], field: Field, dim: usize) -> f64 {
        let prior: &HyperpriorConfig = &self.config.prior;
        match field {
            Field::Lengthscale => prior.lengthscale_field_mean,
            Field::Signal => match prior.signal_field_mean {
                SignalMeanPrior::Fixed { value } => value,
                SignalMeanPrior::Normal { .. } => theta[self.layout.signal_mean(dim).expect("sampled mean")],
            },
        }
    }

    /// Starting point: whitened fields at zero, latent amplitudes and scales
    /// at 1, and a sampled signal mean matched to the spread of the data.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.dim()];
        if self.layout.sample_signal_mean {
            let y = self.data.observations();
            let var = crate::linalg::mean_and_variance(y).1.max(1e-12);
            // k(x, x) = Π s_i² / 2^{d/2} in the verbatim form
            let per_dim = (0.5 * var.ln() + 0.25 * std::f64::consts::LN_2) / self.layout.d as f64;
            for i in 0..self.layout.d {
                theta[self.layout.signal_mean(i).unwrap()] = per_dim.clamp(-5.0, 5.0);
            }
        }
        theta
    }

    fn latent_blocks(&self, theta: &[f64]) -> Result<Vec<LatentBlock>> {
        if theta.len() != self.dim() {
            return Err(BodeError::Argument(format!("expected {} parameters, got {}", self.dim(), theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(BodeError::Domain("non-finite parameter".into()));
        }
        let mut blocks = Vec::with_capacity(2 * self.layout.d);
        for i in 0..self.layout.d {
            for field in [Field::Signal, Field::Lengthscale] {
                let mean = self.field_mean(theta, field, i);
                let amplitude = theta[self.layout.log_amplitude(field, i)].exp();
                let scale = theta[self.layout.log_scale(field, i)].exp();
                if !(amplitude > 0.0 && amplitude.is_finite() && scale > 0.0 && scale.is_finite()) {
                    return Err(BodeError::Domain("latent hyperparameter overflow".into()));
                }
                let r = correlation(&self.sq_dists[i], scale);
                let l = jittered_cholesky(&with_nugget(&r))?.l();
                let z = DVector::from_column_slice(&theta[self.layout.z_range(field, i)]);
                let u = (&l * &z) * amplitude + DVector::from_element(self.layout.n, mean);
                blocks.push(LatentBlock { field, dim: i, mean, amplitude, scale, r, l, z, u });
            }
        }
        Ok(blocks)
    }

    /// Latent hyperparameters and field values encoded by `theta`.
    pub fn unpack(&self, theta: &[f64]) -> Result<(LatentHyperparams, LatentFieldValues)> {
        let blocks = self.latent_blocks(theta)?;
        Ok(self.assemble(&blocks))
    }

    fn assemble(&self, blocks: &[LatentBlock]) -> (LatentHyperparams, LatentFieldValues) {
        let (n, d) = (self.layout.n, self.layout.d);
        let mut fields = LatentFieldValues::constant(n, d, 0.0, 0.0);
        let mut signal = Vec::with_capacity(d);
        let mut lengthscale = Vec::with_capacity(d);
        for b in blocks {
            let p = LatentGpParams { mean: b.mean, amplitude: b.amplitude, scale: b.scale };
            match b.field {
                Field::Signal => {
                    fields.log_signals.set_column(b.dim, &b.u);
                    signal.push(p);
                }
                Field::Lengthscale => {
                    fields.log_lengthscales.set_column(b.dim, &b.u);
                    lengthscale.push(p);
                }
            }
        }
        (LatentHyperparams { signal, lengthscale }, fields)
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        self.evaluate(theta, None)
    }

    /// Log density and its gradient with respect to `theta`.
    pub fn log_density_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.dim() {
            return Err(BodeError::Argument("gradient buffer has wrong length".into()));
        }
        self.evaluate(theta, Some(grad))
    }

    fn evaluate(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let layout = self.layout;
        let n = layout.n;
        let prior = self.config.prior;
        let blocks = self.latent_blocks(theta)?;
        let (_, fields) = self.assemble(&blocks);
        let lik = collapsed_likelihood(&self.data, &fields, &self.config, grad.is_some())?;
        let mut value = lik.value;

        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }

        // d loglik / d u for the signal fields (identical across dimensions)
        // and for each lengthscale field.
        let (gu_signal, gu_length) = if grad.is_some() {
            let w = lik.a.component_mul(&lik.k);
            let gs = DVector::from_iterator(n, (0..n).map(|p| w.row(p).sum()));
            let gl: Vec<DVector<f64>> = (0..layout.d)
                .map(|i| {
                    let xs = &self.coords[i];
                    DVector::from_iterator(
                        n,
                        (0..n).map(|p| {
                            let a = lik.length[(p, i)];
                            (0..n)
                                .filter(|&q| q != p)
                                .map(|q| w[(p, q)] * dlogk_dloglength(a, lik.length[(q, i)], xs[p] - xs[q]))
                                .sum()
                        }),
                    )
                })
                .collect();
            (gs, gl)
        } else {
            (DVector::zeros(0), Vec::new())
        };

        for b in &blocks {
            value += -0.5 * b.z.norm_squared() - 0.5 * n as f64 * LN_2PI;
            value += gamma_ln_pdf(b.amplitude, prior.gamma_shape, prior.gamma_rate) + b.amplitude.ln();
            value += gamma_ln_pdf(b.scale, prior.gamma_shape, prior.gamma_rate) + b.scale.ln();
            if b.field == Field::Signal {
                if let SignalMeanPrior::Normal { mean, variance } = prior.signal_field_mean {
                    value += normal_ln_pdf(b.mean, mean, variance);
                }
            }

            let Some(g) = grad.as_deref_mut() else { continue };
            let gu = match b.field {
                Field::Signal => &gu_signal,
                Field::Lengthscale => &gu_length[b.dim],
            };
            let zr = layout.z_range(b.field, b.dim);
            let gz = b.l.tr_mul(gu) * b.amplitude;
            for (k, idx) in zr.enumerate() {
                g[idx] += gz[k] - b.z[k];
            }
            if b.field == Field::Signal {
                if let (Some(idx), SignalMeanPrior::Normal { mean, variance }) =
                    (layout.signal_mean(b.dim), prior.signal_field_mean)
                {
                    g[idx] += gu.sum() - (b.mean - mean) / variance;
                }
            }
            let ia = layout.log_amplitude(b.field, b.dim);
            let centered = &b.u - DVector::from_element(n, b.mean);
            g[ia] += gu.dot(&centered) + prior.gamma_shape - prior.gamma_rate * b.amplitude;

            // d chol(R) / d ln ℓ = L Φ(L⁻¹ dR L⁻ᵀ), Φ = lower triangle with halved diagonal
            let is = layout.log_scale(b.field, b.dim);
            let inv_l2 = 1.0 / (b.scale * b.scale);
            let dr = b.r.component_mul(&self.sq_dists[b.dim]) * inv_l2;
            let x = b.l.solve_lower_triangular(&dr).expect("positive diagonal");
            let m = b.l.solve_lower_triangular(&x.transpose()).expect("positive diagonal");
            let h = b.l.tr_mul(gu);
            let mut s = 0.0;
            for p in 0..n {
                let mut row = 0.5 * m[(p, p)] * b.z[p];
                for q in 0..p {
                    row += m[(p, q)] * b.z[q];
                }
                s += h[p] * row;
            }
            g[is] += b.amplitude * s + prior.gamma_shape - prior.gamma_rate * b.scale;
        }

        if !value.is_finite() {
            return Err(BodeError::Domain("log density is not finite".into()));
        }
        Ok(value)
    }

    /// `Σ log det(v chol(R + nugget))` over latent blocks: the change of
    /// variables between whitened and centered latent fields.
    pub fn whitening_log_det(&self, theta: &[f64]) -> Result<f64> {
        let blocks = self.latent_blocks(theta)?;
        Ok(blocks
            .iter()
            .map(|b| self.layout.n as f64 * b.amplitude.ln() + b.l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsgp::GibbsForm;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data3() -> Dataset {
        Dataset::new(vec![vec![0.1], vec![0.5], vec![0.85]], vec![0.4, -0.3, 1.1], 1e-6).unwrap()
    }

    fn unit_hp(d: usize) -> LatentHyperparams {
        let p = LatentGpParams { mean: 0.0, amplitude: 1.0, scale: 0.5 };
        LatentHyperparams { signal: vec![p; d], lengthscale: vec![LatentGpParams { mean: -1.0, ..p }; d] }
    }

    // Brute-force density: dense assembly from the public kernel functions and
    // an explicit Gaussian log density via an LU-free Gauss-Jordan inverse.
    fn dense_gaussian_ln_pdf(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> f64 {
        let n = x.len();
        let mut a: Vec<Vec<f64>> = cov.to_vec();
        let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
        let mut det = 1.0;
        for c in 0..n {
            let piv = (c..n).max_by(|&p, &q| a[p][c].abs().partial_cmp(&a[q][c].abs()).unwrap()).unwrap();
            if piv != c {
                a.swap(c, piv);
                inv.swap(c, piv);
                det = -det;
            }
            let d = a[c][c];
            det *= d;
            for j in 0..n {
                a[c][j] /= d;
                inv[c][j] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    for j in 0..n {
                        a[r][j] -= f * a[c][j];
                        inv[r][j] -= f * inv[c][j];
                    }
                }
            }
        }
        let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += r[i] * inv[i][j] * r[j];
            }
        }
        -0.5 * (quad + det.ln() + n as f64 * LN_2PI)
    }

    fn brute_force_posterior(data: &Dataset, f: &LatentFieldValues, hp: &LatentHyperparams, prior: &HyperpriorConfig) -> f64 {
        let n = data.len();
        let d = hp.dim();
        let xs = data.designs();
        let s = |p: usize| -> Vec<f64> { (0..d).map(|i| f.log_signals[(p, i)].exp()).collect() };
        let l = |p: usize| -> Vec<f64> { (0..d).map(|i| f.log_lengthscales[(p, i)].exp()).collect() };
        let cov: Vec<Vec<f64>> = (0..n)
            .map(|p| {
                (0..n)
                    .map(|q| {
                        super::super::gibbs_covariance(&xs[p], &xs[q], &s(p), &s(q), &l(p), &l(q)).unwrap()
                            + if p == q { data.noise_variance() } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let mut total = dense_gaussian_ln_pdf(data.observations(), &vec![0.0; n], &cov);
        for i in 0..d {
            for field in [Field::Signal, Field::Lengthscale] {
                let p = hp.get(field, i);
                let kc: Vec<Vec<f64>> = (0..n)
                    .map(|a| {
                        (0..n)
                            .map(|b| {
                                super::super::latent_se_covariance(xs[a][i], xs[b][i], p.amplitude, p.scale).unwrap()
                                    + if a == b { LATENT_NUGGET * p.amplitude * p.amplitude } else { 0.0 }
                            })
                            .collect()
                    })
                    .collect();
                total += dense_gaussian_ln_pdf(&f.column(field, i), &vec![p.mean; n], &kc);
                total += gamma_ln_pdf(p.amplitude, prior.gamma_shape, prior.gamma_rate);
                total += gamma_ln_pdf(p.scale, prior.gamma_shape, prior.gamma_rate);
            }
            if let SignalMeanPrior::Normal { mean, variance } = prior.signal_field_mean {
                total += normal_ln_pdf(hp.signal[i].mean, mean, variance);
            }
        }
        total
    }

    #[test]
    fn single_point_hand_value() {
        let data = Dataset::new(vec![vec![0.3]], vec![0.0], 1e-6).unwrap();
        let fields = LatentFieldValues::constant(1, 1, 0.0, 0.0);
        let hp = LatentHyperparams {
            signal: vec![LatentGpParams { mean: 0.0, amplitude: 1.0, scale: 1.0 }],
            lengthscale: vec![LatentGpParams { mean: 0.0, amplitude: 1.0, scale: 1.0 }],
        };
        let mut config = NsgpConfig::for_dim(1);
        config.prior.signal_field_mean = SignalMeanPrior::Fixed { value: 0.0 };
        let got = log_unnormalized_posterior(&data, &fields, &hp, &config).unwrap();
        let var = 1.0 / 2f64.sqrt() + 1e-6;
        let lik = -0.5 * (LN_2PI + var.ln());
        let latent = 2.0 * -0.5 * (LN_2PI + (1.0 + LATENT_NUGGET).ln());
        let priors = 4.0 * -1.0; // Gamma(1,1) at 1
        assert_relative_eq!(got, lik + latent + priors, epsilon = 1e-12);
    }

    #[test]
    fn larger_residuals_lower_density() {
        let data = data3();
        let fields = LatentFieldValues::constant(3, 1, 0.0, -1.0);
        let hp = unit_hp(1);
        let config = NsgpConfig::for_dim(1);
        let a = log_unnormalized_posterior(&data, &fields, &hp, &config).unwrap();
        let scaled: Vec<f64> = data.observations().iter().map(|y| 10.0 * y).collect();
        let b = log_unnormalized_posterior(&data.with_observations(scaled).unwrap(), &fields, &hp, &config).unwrap();
        assert!(b < a);
    }

    #[test]
    fn matches_dense_brute_force() {
        let data = data3();
        let mut fields = LatentFieldValues::constant(3, 1, 0.2, -1.3);
        fields.log_signals[(1, 0)] = -0.4;
        fields.log_lengthscales[(2, 0)] = -0.7;
        let mut hp = unit_hp(1);
        hp.signal[0].mean = 0.3;
        hp.lengthscale[0].scale = 0.8;
        let config = NsgpConfig::for_dim(1);
        let got = log_unnormalized_posterior(&data, &fields, &hp, &config).unwrap();
        let oracle = brute_force_posterior(&data, &fields, &hp, &config.prior);
        assert!((got - oracle).abs() <= 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn permutation_invariant() {
        let data = Dataset::new(
            vec![vec![0.1, 0.9], vec![0.5, 0.2], vec![0.85, 0.6], vec![0.3, 0.4]],
            vec![0.4, -0.3, 1.1, 0.2],
            1e-6,
        )
        .unwrap();
        let mut fields = LatentFieldValues::constant(4, 2, 0.1, -0.5);
        for p in 0..4 {
            fields.log_signals[(p, 0)] = 0.1 * p as f64;
            fields.log_lengthscales[(p, 1)] = -0.5 - 0.2 * p as f64;
        }
        let hp = unit_hp(2);
        let config = NsgpConfig::for_dim(2);
        let a = log_unnormalized_posterior(&data, &fields, &hp, &config).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pd = Dataset::new(
            perm.iter().map(|&i| data.designs()[i].clone()).collect(),
            perm.iter().map(|&i| data.observations()[i]).collect(),
            1e-6,
        )
        .unwrap();
        let pf = LatentFieldValues {
            log_lengthscales: DMatrix::from_fn(4, 2, |r, c| fields.log_lengthscales[(perm[r], c)]),
            log_signals: DMatrix::from_fn(4, 2, |r, c| fields.log_signals[(perm[r], c)]),
        };
        let b = log_unnormalized_posterior(&pd, &pf, &hp, &config).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = Dataset::empty(1e-6).unwrap();
        let fields = LatentFieldValues::constant(0, 1, 0.0, 0.0);
        assert!(log_unnormalized_posterior(&data, &fields, &unit_hp(1), &NsgpConfig::for_dim(1)).is_err());
    }

    #[test]
    fn whitened_target_equals_centered_plus_jacobian() {
        let target = NsgpTarget::new(data3(), NsgpConfig::for_dim(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let theta: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-0.8..0.8)).collect();
            let (hp, fields) = target.unpack(&theta).unwrap();
            let centered = log_unnormalized_posterior(target.data(), &fields, &hp, target.config()).unwrap();
            let jac: f64 = hp.signal.iter().chain(&hp.lengthscale).map(|p| p.amplitude.ln() + p.scale.ln()).sum();
            let whitened = target.log_density(&theta).unwrap();
            let expected = centered + target.whitening_log_det(&theta).unwrap() + jac;
            assert_relative_eq!(whitened, expected, epsilon = 1e-8, max_relative = 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_2d() {
        let data = Dataset::new(
            vec![vec![0.1, 0.9], vec![0.5, 0.2], vec![0.85, 0.6]],
            vec![0.4, -0.3, 1.1],
            1e-4,
        )
        .unwrap();
        let config = NsgpConfig { gibbs_form: GibbsForm::Normalized, ..NsgpConfig::for_dim(2) };
        let target = NsgpTarget::new(data, config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut g = vec![0.0; target.dim()];
        target.log_density_and_gradient(&theta, &mut g).unwrap();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let fd = (target.log_density(&tp).unwrap() - target.log_density(&tm).unwrap()) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn grow_appends_zero_coordinates() {
        let layout = ParamLayout { n: 2, d: 1, sample_signal_mean: true };
        let theta: Vec<f64> = (0..layout.len()).map(|i| i as f64 + 1.0).collect();
        let grown = layout.grow(&theta, 3);
        assert_eq!(grown, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }
}
