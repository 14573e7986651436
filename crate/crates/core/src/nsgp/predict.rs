use nalgebra::{DMatrix, DVector};

use super::kernel::gibbs_unchecked;
use super::{Dataset, Field, LatentFieldValues, LatentGpParams, LatentHyperparams, NsgpConfig, LATENT_NUGGET};
use crate::error::{BodeError, Result};
use crate::linalg::{jittered_cholesky, JitteredCholesky};

/// Conditional mean of one latent log-field GP given its values at the designs.
#[derive(Debug, Clone)]
struct LatentPredictor {
    coords: Vec<f64>,
    params: LatentGpParams,
    /// `(K + nugget)^{-1} (u - m)`
    weights: DVector<f64>,
}

impl LatentPredictor {
    fn new(coords: Vec<f64>, values: &[f64], params: LatentGpParams) -> Result<Self> {
        let n = coords.len();
        let v2 = params.amplitude * params.amplitude;
        let inv2l2 = 1.0 / (2.0 * params.scale * params.scale);
        let k = DMatrix::from_fn(n, n, |p, q| {
            let d = coords[p] - coords[q];
            let nug = if p == q { LATENT_NUGGET } else { 0.0 };
            v2 * ((-d * d * inv2l2).exp() + nug)
        });
        let chol = jittered_cholesky(&k)?;
        let resid = DVector::from_iterator(n, values.iter().map(|u| u - params.mean));
        let weights = chol.solve(&resid);
        Ok(LatentPredictor { coords, params, weights })
    }

    fn log_mean_at(&self, t: f64) -> f64 {
        let v2 = self.params.amplitude * self.params.amplitude;
        let inv2l2 = 1.0 / (2.0 * self.params.scale * self.params.scale);
        let mut acc = self.params.mean;
        for (c, w) in self.coords.iter().zip(self.weights.iter()) {
            let d = t - c;
            acc += w * v2 * (-d * d * inv2l2).exp();
        }
        acc
    }
}

/// Signal and lengthscale values (not logs) at a batch of points, row per point.
#[derive(Debug, Clone)]
pub struct LocalFields {
    pub signal: DMatrix<f64>,
    pub lengthscale: DMatrix<f64>,
}

impl LocalFields {
    pub fn len(&self) -> usize {
        self.signal.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.nrows() == 0
    }

    fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
        m.row(i).iter().copied().collect()
    }
}

/// One posterior draw of the latent fields and hyperparameters together with
/// the factorization of `K + σ² I` it implies on the (possibly standardized)
/// data.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    designs: Vec<Vec<f64>>,
    noise_variance: f64,
    hyperparams: LatentHyperparams,
    fields: LatentFieldValues,
    config: NsgpConfig,
    design_fields: LocalFields,
    latent: Vec<[LatentPredictor; 2]>,
    factor: JitteredCholesky,
    alpha: DVector<f64>,
}

impl PosteriorSample {
    pub fn new(
        data: &Dataset,
        hyperparams: LatentHyperparams,
        fields: LatentFieldValues,
        config: NsgpConfig,
    ) -> Result<Self> {
        hyperparams.validate()?;
        let n = data.len();
        let d = hyperparams.dim();
        if let Some(x) = data.designs().first() {
            if x.len() != d {
                return Err(BodeError::Argument(format!(
                    "data dimension {} does not match hyperparameters ({d})",
                    x.len()
                )));
            }
        }
        fields.validate(n, d)?;

        let mut latent = Vec::with_capacity(d);
        for i in 0..d {
            let coords: Vec<f64> = data.designs().iter().map(|x| x[i]).collect();
            let sig = LatentPredictor::new(coords.clone(), &fields.column(Field::Signal, i), hyperparams.signal[i])?;
            let len = LatentPredictor::new(coords, &fields.column(Field::Lengthscale, i), hyperparams.lengthscale[i])?;
            latent.push([sig, len]);
        }

        let design_fields = LocalFields {
            signal: fields.log_signals.map(f64::exp),
            lengthscale: fields.log_lengthscales.map(f64::exp),
        };
        let mut sample = PosteriorSample {
            designs: data.designs().to_vec(),
            noise_variance: data.noise_variance(),
            hyperparams,
            fields,
            config,
            design_fields,
            latent,
            factor: jittered_cholesky(&DMatrix::zeros(0, 0))?,
            alpha: DVector::zeros(0),
        };
        let mut cov = sample.gram(&sample.designs, &sample.design_fields);
        for i in 0..n {
            cov[(i, i)] += data.noise_variance();
        }
        sample.factor = jittered_cholesky(&cov)?;
        let y = DVector::from_column_slice(data.observations());
        sample.alpha = sample.factor.solve(&y);
        Ok(sample)
    }

    pub fn dim(&self) -> usize {
        self.hyperparams.dim()
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn hyperparams(&self) -> &LatentHyperparams {
        &self.hyperparams
    }

    pub fn fields(&self) -> &LatentFieldValues {
        &self.fields
    }

    pub fn config(&self) -> &NsgpConfig {
        &self.config
    }

    pub fn designs(&self) -> &[Vec<f64>] {
        &self.designs
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Diagonal jitter the response covariance needed.
    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    /// Latent field value (exp of the latent-GP conditional mean) at `x`.
    pub fn latent_field_at(&self, x: &[f64], field: Field, dim: usize) -> Result<f64> {
        if dim >= self.dim() || x.len() != self.dim() {
            return Err(BodeError::Argument(format!("dimension {dim} out of range")));
        }
        let idx = match field {
            Field::Signal => 0,
            Field::Lengthscale => 1,
        };
        Ok(self.latent[dim][idx].log_mean_at(x[dim]).exp())
    }

    /// Signal and lengthscale values at each point of a batch.
    pub fn local_fields(&self, points: &[Vec<f64>]) -> LocalFields {
        let d = self.dim();
        let mut signal = DMatrix::zeros(points.len(), d);
        let mut lengthscale = DMatrix::zeros(points.len(), d);
        for (p, x) in points.iter().enumerate() {
            for i in 0..d {
                signal[(p, i)] = self.latent[i][0].log_mean_at(x[i]).exp();
                lengthscale[(p, i)] = self.latent[i][1].log_mean_at(x[i]).exp();
            }
        }
        LocalFields { signal, lengthscale }
    }

    /// Prior covariance matrix between two batches.
    pub fn cross_prior(
        &self,
        a: &[Vec<f64>],
        fa: &LocalFields,
        b: &[Vec<f64>],
        fb: &LocalFields,
    ) -> DMatrix<f64> {
        let form = self.config.gibbs_form;
        let rows_a: Vec<(Vec<f64>, Vec<f64>)> =
            (0..a.len()).map(|i| (LocalFields::row(&fa.signal, i), LocalFields::row(&fa.lengthscale, i))).collect();
        let rows_b: Vec<(Vec<f64>, Vec<f64>)> =
            (0..b.len()).map(|i| (LocalFields::row(&fb.signal, i), LocalFields::row(&fb.lengthscale, i))).collect();
        DMatrix::from_fn(a.len(), b.len(), |i, j| {
            gibbs_unchecked(form, &a[i], &b[j], &rows_a[i].0, &rows_b[j].0, &rows_a[i].1, &rows_b[j].1)
        })
    }

    /// Symmetric prior covariance of a batch.
    pub fn gram(&self, pts: &[Vec<f64>], f: &LocalFields) -> DMatrix<f64> {
        let n = pts.len();
        let mut k = DMatrix::zeros(n, n);
        let form = self.config.gibbs_form;
        let rows: Vec<(Vec<f64>, Vec<f64>)> =
            (0..n).map(|i| (LocalFields::row(&f.signal, i), LocalFields::row(&f.lengthscale, i))).collect();
        for i in 0..n {
            for j in 0..=i {
                let v = gibbs_unchecked(form, &pts[i], &pts[j], &rows[i].0, &rows[j].0, &rows[i].1, &rows[j].1);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Cross-covariance between a batch and the designs (rows = batch).
    pub fn cross_designs(&self, pts: &[Vec<f64>], f: &LocalFields) -> DMatrix<f64> {
        self.cross_prior(pts, f, &self.designs, &self.design_fields)
    }

    /// `(K + σ² I)^{-1} k_n(x)` for every column of `cross.transpose()`.
    pub fn solve_cross(&self, cross: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_empty() {
            return DMatrix::zeros(0, cross.nrows());
        }
        self.factor.chol.solve(&cross.transpose())
    }

    /// Predictive mean at a batch, given its cross-covariance with the designs.
    pub fn mean_from_cross(&self, cross: &DMatrix<f64>) -> DVector<f64> {
        if self.is_empty() {
            return DVector::zeros(cross.nrows());
        }
        cross * &self.alpha
    }

    /// Conditional posterior mean and variance of the response at `x`.
    pub fn conditional_predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(BodeError::Argument("prediction point has wrong dimension".into()));
        }
        let pts = vec![x.to_vec()];
        let f = self.local_fields(&pts);
        let prior = self.gram(&pts, &f)[(0, 0)];
        if self.is_empty() {
            return Ok((0.0, prior));
        }
        let cross = self.cross_designs(&pts, &f);
        let kn = cross.row(0).transpose();
        let mean = kn.dot(&self.alpha);
        let v = self
            .factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&kn)
            .ok_or(BodeError::NotPositiveDefinite { jitter: self.factor.jitter })?;
        let var = (prior - v.norm_squared()).max(0.0);
        Ok((mean, var))
    }

    /// Prior variance `k(x, x)`.
    pub fn prior_variance(&self, x: &[f64]) -> f64 {
        let pts = vec![x.to_vec()];
        let f = self.local_fields(&pts);
        self.gram(&pts, &f)[(0, 0)]
    }

    /// Conditional posterior covariance matrix of a batch.
    pub fn conditional_covariance(&self, pts: &[Vec<f64>], f: &LocalFields) -> DMatrix<f64> {
        let mut k = self.gram(pts, f);
        if !self.is_empty() {
            let cross = self.cross_designs(pts, f);
            let v = self
                .factor
                .chol
                .l_dirty()
                .solve_lower_triangular(&cross.transpose())
                .expect("positive diagonal");
            k -= v.transpose() * v;
        }
        // symmetrize against round-off
        let kt = k.transpose();
        (k + kt) * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> NsgpConfig {
        NsgpConfig::for_dim(1)
    }

    fn hp(mean_s: f64, mean_l: f64, scale: f64) -> LatentHyperparams {
        LatentHyperparams {
            signal: vec![LatentGpParams { mean: mean_s, amplitude: 1.0, scale }],
            lengthscale: vec![LatentGpParams { mean: mean_l, amplitude: 1.0, scale }],
        }
    }

    fn three_points() -> Dataset {
        Dataset::new(vec![vec![0.1], vec![0.45], vec![0.8]], vec![0.3, -1.2, 0.7], 1e-6).unwrap()
    }

    // Dense stationary GP with kernel s² exp(-Δ²/(2l²)) / sqrt 2, written independently.
    fn stationary_oracle(xs: &[f64], ys: &[f64], noise: f64, s: f64, l: f64, x: f64) -> (f64, f64) {
        let k = |a: f64, b: f64| s * s * (-(a - b).powi(2) / (2.0 * l * l)).exp() / 2f64.sqrt();
        let n = xs.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = k(xs[i], xs[j]) + if i == j { noise } else { 0.0 };
            }
        }
        // Gauss-Jordan on [K | y] and [K | k*]
        let solve = |rhs: Vec<f64>| -> Vec<f64> {
            let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
            for i in 0..n {
                m[i][n] = rhs[i];
            }
            for c in 0..n {
                let piv = (c..n).max_by(|&p, &q| m[p][c].abs().partial_cmp(&m[q][c].abs()).unwrap()).unwrap();
                m.swap(c, piv);
                for r in 0..n {
                    if r != c {
                        let f = m[r][c] / m[c][c];
                        for cc in c..=n {
                            m[r][cc] -= f * m[c][cc];
                        }
                    }
                }
            }
            (0..n).map(|i| m[i][n] / m[i][i]).collect()
        };
        let ks: Vec<f64> = xs.iter().map(|&xi| k(x, xi)).collect();
        let alpha = solve(ys.to_vec());
        let beta = solve(ks.clone());
        let mean = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let var = k(x, x) - ks.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        (mean, var)
    }

    #[test]
    fn interpolates_observed_design() {
        let data = three_points();
        let fields = LatentFieldValues::constant(3, 1, 0.0, (0.2f64).ln());
        let s = PosteriorSample::new(&data, hp(0.0, (0.2f64).ln(), 0.3), fields, cfg()).unwrap();
        for (x, y) in data.designs().iter().zip(data.observations()) {
            let (m, v) = s.conditional_predict(x).unwrap();
            assert!((m - y).abs() <= 1e-2, "{m} vs {y}");
            assert!(v <= 1e-3);
        }
    }

    #[test]
    fn empty_data_gives_prior() {
        let data = Dataset::empty(1e-6).unwrap();
        let fields = LatentFieldValues::constant(0, 1, 0.0, 0.0);
        let s = PosteriorSample::new(&data, hp(0.5, -1.0, 0.3), fields, cfg()).unwrap();
        let (m, v) = s.conditional_predict(&[0.4]).unwrap();
        assert_eq!(m, 0.0);
        assert_relative_eq!(v, (1.0f64).exp() / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn constant_fields_match_stationary_oracle() {
        let data = three_points();
        let (ls, ll) = (0.4f64, 0.25f64);
        let fields = LatentFieldValues::constant(3, 1, ls, ll.ln());
        let s = PosteriorSample::new(&data, hp(ls, ll.ln(), 0.5), fields, cfg()).unwrap();
        let xs: Vec<f64> = data.designs().iter().map(|x| x[0]).collect();
        for &x in &[0.0, 0.2, 0.33, 0.6, 0.95] {
            let (m, v) = s.conditional_predict(&[x]).unwrap();
            let (mo, vo) = stationary_oracle(&xs, data.observations(), 1e-6, ls.exp(), ll, x);
            assert!((m - mo).abs() <= 1e-10, "mean {m} vs {mo}");
            assert!((v - vo.max(0.0)).abs() <= 1e-10, "var {v} vs {vo}");
        }
    }

    #[test]
    fn variance_never_exceeds_prior() {
        let data = three_points();
        let mut fields = LatentFieldValues::constant(3, 1, 0.0, -1.5);
        fields.log_signals[(1, 0)] = 0.7;
        fields.log_lengthscales[(2, 0)] = -2.5;
        let s = PosteriorSample::new(&data, hp(0.1, -2.0, 0.3), fields, cfg()).unwrap();
        for i in 0..=50 {
            let x = [i as f64 / 50.0];
            let (_, v) = s.conditional_predict(&x).unwrap();
            assert!(v <= s.prior_variance(&x) + 1e-12);
        }
    }

    #[test]
    fn latent_field_interpolates_and_reverts() {
        let data = Dataset::new(vec![vec![0.0], vec![2.0]], vec![0.0, 0.0], 1e-6).unwrap();
        let mut fields = LatentFieldValues::constant(2, 1, 0.0, 0.0);
        fields.log_lengthscales[(0, 0)] = -1.0;
        fields.log_lengthscales[(1, 0)] = 0.5;
        let mean_l = -0.2;
        let hyper = LatentHyperparams {
            signal: vec![LatentGpParams { mean: 0.0, amplitude: 1.0, scale: 0.1 }],
            lengthscale: vec![LatentGpParams { mean: mean_l, amplitude: 1.0, scale: 0.1 }],
        };
        let s = PosteriorSample::new(&data, hyper, fields, cfg()).unwrap();
        let at0 = s.latent_field_at(&[0.0], Field::Lengthscale, 0).unwrap();
        assert_relative_eq!(at0, (-1.0f64).exp(), max_relative = 1e-6);
        let far = s.latent_field_at(&[10.0], Field::Lengthscale, 0).unwrap();
        assert_relative_eq!(far, mean_l.exp(), max_relative = 0.01);
        assert!(s.latent_field_at(&[0.0], Field::Signal, 1).is_err());
    }

    #[test]
    fn latent_midpoint_lies_between_endpoints() {
        // Symmetric geometry around the midpoint; the dense latent GP mean at
        // 0.5 is m + k*ᵀ K⁻¹ (u - m), evaluated by hand below.
        let data = Dataset::new(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0], 1e-6).unwrap();
        let mut fields = LatentFieldValues::constant(2, 1, 0.0, 0.0);
        let (a, b) = (-1.0, 0.6);
        fields.log_lengthscales[(0, 0)] = a;
        fields.log_lengthscales[(1, 0)] = b;
        let p = LatentGpParams { mean: -0.2, amplitude: 1.0, scale: 0.6 };
        let hyper = LatentHyperparams { signal: vec![p], lengthscale: vec![p] };
        let s = PosteriorSample::new(&data, hyper, fields, cfg()).unwrap();
        let mid = s.latent_field_at(&[0.5], Field::Lengthscale, 0).unwrap();
        assert!(mid > (a as f64).exp() && mid < (b as f64).exp());

        let r = (-1.0f64 / (2.0 * 0.36)).exp();
        let ks = (-0.25f64 / (2.0 * 0.36)).exp();
        let k00 = 1.0 + LATENT_NUGGET;
        let det = k00 * k00 - r * r;
        let (ra, rb) = (a - p.mean, b - p.mean);
        let w0 = (k00 * ra - r * rb) / det;
        let w1 = (k00 * rb - r * ra) / det;
        let oracle = (p.mean + ks * (w0 + w1)).exp();
        assert_relative_eq!(mid, oracle, max_relative = 1e-12);
    }

    #[test]
    fn mismatched_fields_rejected() {
        let data = three_points();
        let fields = LatentFieldValues::constant(2, 1, 0.0, 0.0);
        assert!(PosteriorSample::new(&data, hp(0.0, 0.0, 1.0), fields, cfg()).is_err());
    }
}
