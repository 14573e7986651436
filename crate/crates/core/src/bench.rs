//! Synthetic benchmark functions, brute-force QoI oracles and the
//! method-comparison harness.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::Acquisition;
use crate::design::DesignSpace;
use crate::error::{BodeError, Result};
use crate::linalg::quantile_sorted;
use crate::qoi::{qoi_of_values, InputMeasure, QoiKind, QoiSpec};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sdoe::{run, CampaignConfig, CampaignTrace};

pub const NAMES: [&str; 4] = ["sine-exp-1d", "gaussian-mixture-1d", "dette-3d", "friedman-5d"];

/// Where a reference value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Published value, reproduced by the oracle.
    Published,
    /// Published value that the formula does not reproduce; the brute-force
    /// oracle is used instead.
    OracleAuthoritative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceQoi {
    pub kind: QoiKind,
    /// Percentile level; ignored for other kinds.
    pub alpha: f64,
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: &'static str,
    pub space: DesignSpace,
    /// Campaigns on this benchmark standardize outputs.
    pub standardize: bool,
    pub reference_qois: Vec<ReferenceQoi>,
    f: fn(&[f64]) -> f64,
}

impl Benchmark {
    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() || !self.space.contains(x) {
            return Err(BodeError::Argument(format!("{x:?} lies outside the {} domain", self.name)));
        }
        Ok((self.f)(x))
    }

    pub fn reference(&self, kind: QoiKind) -> Option<&ReferenceQoi> {
        self.reference_qois.iter().find(|r| r.kind == kind)
    }
}

fn sine_exp(x: &[f64]) -> f64 {
    4.0 * (1.0 - (6.0 * x[0] + 8.0 * (6.0 * x[0] - 7.0).exp()).sin())
}

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * s * s)).exp() / ((2.0 * PI).sqrt() * s)
}

fn gaussian_mixture(x: &[f64]) -> f64 {
    normal_pdf(x[0], 0.2, 0.05) + normal_pdf(x[0], 0.8, 0.05)
}

fn dette(x: &[f64]) -> f64 {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    4.0 * (x1 + 8.0 * x2 - 8.0 * x2 * x2 - 2.0).powi(2)
        + (3.0 - 4.0 * x2).powi(2)
        + 16.0 * (x3 + 1.0).sqrt() * (2.0 * x3 - 1.0).powi(2)
}

fn friedman(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 5.0).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

fn refs(values: [f64; 4], provenance: Provenance) -> Vec<ReferenceQoi> {
    let kinds = [QoiKind::Expectation, QoiKind::Variance, QoiKind::Minimum, QoiKind::Percentile];
    kinds
        .iter()
        .zip(values)
        .map(|(&kind, value)| ReferenceQoi { kind, alpha: 0.025, value, provenance })
        .collect()
}

pub fn benchmark(name: &str) -> Result<Benchmark> {
    use Provenance::*;
    let b = match name {
        "sine-exp-1d" => Benchmark {
            name: "sine-exp-1d",
            space: DesignSpace::unit(1),
            standardize: true,
            reference_qois: refs([-1.36, 0.30, -2.00, -1.99], OracleAuthoritative),
            f: sine_exp,
        },
        "gaussian-mixture-1d" => Benchmark {
            name: "gaussian-mixture-1d",
            space: DesignSpace::unit(1),
            standardize: false,
            reference_qois: refs([2.00, 7.28, 0.00, 0.00], Published),
            f: gaussian_mixture,
        },
        "dette-3d" => Benchmark {
            name: "dette-3d",
            space: DesignSpace::unit(3),
            standardize: true,
            reference_qois: refs([-0.7864, 0.0209, -0.9999, -0.9899], OracleAuthoritative),
            f: dette,
        },
        "friedman-5d" => Benchmark {
            name: "friedman-5d",
            space: DesignSpace::unit(5),
            standardize: true,
            reference_qois: refs([0.3882, 1.0896, -1.5906, -1.2782], OracleAuthoritative),
            f: friedman,
        },
        other => {
            return Err(BodeError::Argument(format!("unknown benchmark '{other}'; known: {}", NAMES.join(", "))))
        }
    };
    Ok(b)
}

pub fn benchmark_fn(name: &str, x: &[f64]) -> Result<f64> {
    benchmark(name)?.eval(x)
}

/// A brute-force QoI value and how it was computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleQoi {
    pub value: f64,
    pub n_oracle: usize,
    /// Monte-Carlo seed; `None` for deterministic quadrature.
    pub seed: Option<u64>,
}

/// Ground-truth QoI of `f` under the uniform measure on `space` (or the
/// explicit measure in `spec`): composite Simpson quadrature in one
/// dimension, plain Monte Carlo otherwise. Computed on the raw scale.
pub fn oracle_qoi_of(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    space: &DesignSpace,
    spec: &QoiSpec,
    n_oracle: usize,
    seed: u64,
) -> Result<OracleQoi> {
    spec.validate()?;
    if n_oracle < 3 {
        return Err(BodeError::Argument("n_oracle must be at least 3".into()));
    }
    if let InputMeasure::Sample { points } = &spec.measure {
        let mut v: Vec<f64> = points.iter().map(|p| f(p)).collect();
        let value = qoi_of_values(spec.kind, spec.alpha, &mut v)?;
        return Ok(OracleQoi { value, n_oracle: points.len(), seed: None });
    }
    if space.dim() == 1 {
        // odd node count for Simpson's rule
        let n = n_oracle | 1;
        let (a, b) = space.bounds()[0];
        let h = (b - a) / (n - 1) as f64;
        let mut values: Vec<f64> = (0..n).into_par_iter().map(|i| f(&[a + h * i as f64])).collect();
        let value = match spec.kind {
            QoiKind::Expectation | QoiKind::Variance => {
                let simpson = |g: &dyn Fn(f64) -> f64| -> f64 {
                    let s: f64 = values
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let w = if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                            w * g(v)
                        })
                        .sum();
                    s * h / 3.0 / (b - a)
                };
                let mean = simpson(&|v| v);
                if spec.kind == QoiKind::Expectation {
                    mean
                } else {
                    simpson(&|v| (v - mean) * (v - mean)).max(0.0)
                }
            }
            _ => qoi_of_values(spec.kind, spec.alpha, &mut values)?,
        };
        return Ok(OracleQoi { value, n_oracle: n, seed: None });
    }
    let mut rng = stream_rng(seed, Stream::Oracle, &[n_oracle as u64]);
    let pts: Vec<Vec<f64>> = (0..n_oracle)
        .map(|_| space.bounds().iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
        .collect();
    let mut values: Vec<f64> = pts.par_iter().map(|p| f(p)).collect();
    let value = qoi_of_values(spec.kind, spec.alpha, &mut values)?;
    Ok(OracleQoi { value, n_oracle, seed: Some(seed) })
}

pub fn oracle_qoi(name: &str, spec: &QoiSpec, n_oracle: usize, seed: u64) -> Result<OracleQoi> {
    let b = benchmark(name)?;
    oracle_qoi_of(&b.f, &b.space, spec, n_oracle, seed)
}

/// One row of a comparison report: error statistics across replications at
/// one iteration of one (benchmark, acquisition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub benchmark: String,
    pub acquisition: Acquisition,
    pub iter: usize,
    pub median_abs_err: f64,
    pub q25_abs_err: f64,
    pub q75_abs_err: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRun {
    pub benchmark: String,
    pub acquisition: Acquisition,
    pub replication: usize,
    pub seed: u64,
    /// `Err` message when the campaign failed.
    pub outcome: std::result::Result<CampaignTrace, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<CampaignRun>,
    /// Raw-scale oracle value per benchmark.
    pub oracle: Vec<(String, f64)>,
}

impl ComparisonReport {
    /// Cells with at least one failed replication.
    pub fn incomplete_cells(&self) -> Vec<(String, Acquisition)> {
        let mut out: Vec<(String, Acquisition)> = Vec::new();
        for r in self.runs.iter().filter(|r| r.outcome.is_err()) {
            if !out.iter().any(|(b, a)| b == &r.benchmark && *a == r.acquisition) {
                out.push((r.benchmark.clone(), r.acquisition));
            }
        }
        out
    }

    pub fn final_median(&self, benchmark: &str, acquisition: Acquisition) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.benchmark == benchmark && r.acquisition == acquisition)
            .max_by_key(|r| r.iter)
            .map(|r| r.median_abs_err)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["benchmark", "acquisition", "iter", "median_abs_err", "q25_abs_err", "q75_abs_err", "n_runs"])?;
        for r in &self.rows {
            out.write_record([
                r.benchmark.clone(),
                r.acquisition.to_string(),
                r.iter.to_string(),
                r.median_abs_err.to_string(),
                r.q25_abs_err.to_string(),
                r.q75_abs_err.to_string(),
                r.n_runs.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs every (benchmark, acquisition) cell `replications` times. Replication
/// `r` uses the same seed for every acquisition. Errors are measured on the
/// raw output scale against the brute-force oracle.
pub fn compare(
    benchmarks: &[&str],
    acquisitions: &[Acquisition],
    replications: usize,
    configure: &(dyn Fn(&Benchmark) -> CampaignConfig + Sync),
    n_oracle: usize,
) -> Result<ComparisonReport> {
    if replications == 0 {
        return Err(BodeError::Argument("replications must be at least 1".into()));
    }
    let benches = benchmarks.iter().map(|n| benchmark(n)).collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    let mut oracle = Vec::new();
    for b in &benches {
        let cfg = configure(b);
        cfg.validate()?;
        oracle.push((b.name.to_string(), oracle_qoi_of(&b.f, &b.space, &cfg.qoi, n_oracle, cfg.seed)?.value));
        for &a in acquisitions {
            for r in 0..replications {
                let seed = derive_seed(cfg.seed, Stream::InitialDesign, &[r as u64]);
                jobs.push((b, CampaignConfig { acquisition: a, seed, ..cfg.clone() }, r));
            }
        }
    }
    let runs: Vec<CampaignRun> = jobs
        .par_iter()
        .map(|(b, cfg, r)| {
            let mut f = |x: &[f64]| b.eval(x);
            CampaignRun {
                benchmark: b.name.to_string(),
                acquisition: cfg.acquisition,
                replication: *r,
                seed: cfg.seed,
                outcome: run(&mut f, cfg, &b.space, None).map_err(|e| e.to_string()),
            }
        })
        .collect();

    let mut rows = Vec::new();
    for b in &benches {
        let truth = oracle.iter().find(|(n, _)| n == b.name).expect("oracle computed").1;
        let iterations = {
            let c = configure(b);
            c.n_max - c.n_initial
        };
        for &a in acquisitions {
            let traces: Vec<&CampaignTrace> = runs
                .iter()
                .filter(|r| r.benchmark == b.name && r.acquisition == a)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            for it in 0..iterations {
                let mut errs: Vec<f64> =
                    traces.iter().filter_map(|t| t.raw_qoi.get(it)).map(|q| (q.mean - truth).abs()).collect();
                errs.sort_by(f64::total_cmp);
                let stat = |p: f64| if errs.is_empty() { f64::NAN } else { quantile_sorted(&errs, p) };
                rows.push(ComparisonRow {
                    benchmark: b.name.to_string(),
                    acquisition: a,
                    iter: it + 1,
                    median_abs_err: stat(0.5),
                    q25_abs_err: stat(0.25),
                    q75_abs_err: stat(0.75),
                    n_runs: errs.len(),
                });
            }
        }
    }
    Ok(ComparisonReport { rows, runs, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmc::HmcConfig;
    use crate::inner_opt::BgoConfig;
    use crate::acquisition::EkldConfig;
    use crate::sdoe::KleConfig;

    #[test]
    fn hand_values() {
        let v = benchmark_fn("gaussian-mixture-1d", &[0.2]).unwrap();
        assert!((v - 7.978_845_608).abs() < 1e-6, "{v}");
        assert_eq!(benchmark_fn("friedman-5d", &[0.0; 5]).unwrap(), 500.0);
        // 6x + 8e^{6x-7} = π/2 solved by bisection
        let g = |x: f64| 6.0 * x + 8.0 * (6.0 * x - 7.0).exp() - PI / 2.0;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 { hi = mid } else { lo = mid }
        }
        assert!(benchmark_fn("sine-exp-1d", &[lo]).unwrap().abs() < 1e-12);
        assert!(benchmark_fn("dette-3d", &[0.5, 0.5, 0.5]).unwrap().is_finite());
    }

    #[test]
    fn out_of_domain_is_an_error() {
        assert!(benchmark_fn("sine-exp-1d", &[1.5]).is_err());
        assert!(benchmark_fn("friedman-5d", &[0.0; 4]).is_err());
        assert!(benchmark("nope").is_err());
    }

    #[test]
    fn mixture_oracle_matches_analytic() {
        let e = oracle_qoi("gaussian-mixture-1d", &QoiSpec::new(QoiKind::Expectation), 100_001, 0).unwrap();
        let v = oracle_qoi("gaussian-mixture-1d", &QoiSpec::new(QoiKind::Variance), 100_001, 0).unwrap();
        // each bump integrates to Φ(±16) ≈ 1 over [0,1]; ∫pdf² = 1/(2√π s)
        let analytic_v = 2.0 / (2.0 * PI.sqrt() * 0.05) - 4.0;
        assert!((e.value - 2.0).abs() < 1e-3, "{e:?}");
        assert!((v.value - analytic_v).abs() < 1e-2, "{v:?}");
        let b = benchmark("gaussian-mixture-1d").unwrap();
        for r in &b.reference_qois {
            let spec = QoiSpec { alpha: r.alpha, ..QoiSpec::new(r.kind) };
            let o = oracle_qoi("gaussian-mixture-1d", &spec, 100_001, 0).unwrap();
            assert!((o.value - r.value).abs() < 0.01, "{:?} vs {o:?}", r);
        }
    }

    #[test]
    fn constant_function_oracle() {
        let f = |_: &[f64]| 3.25;
        for space in [DesignSpace::unit(1), DesignSpace::unit(3)] {
            let e = oracle_qoi_of(&f, &space, &QoiSpec::new(QoiKind::Expectation), 1001, 1).unwrap();
            let v = oracle_qoi_of(&f, &space, &QoiSpec::new(QoiKind::Variance), 1001, 1).unwrap();
            assert!((e.value - 3.25).abs() < 1e-12);
            assert!(v.value.abs() < 1e-12);
        }
    }

    #[test]
    fn conflicting_references_are_tagged() {
        // the raw sine-exp function is non-negative, so a negative published
        // minimum cannot come from the formula as printed
        let m = oracle_qoi("sine-exp-1d", &QoiSpec::new(QoiKind::Minimum), 100_001, 0).unwrap();
        let b = benchmark("sine-exp-1d").unwrap();
        let r = b.reference(QoiKind::Minimum).unwrap();
        assert!(m.value >= 0.0 && (m.value - r.value).abs() > 1.0);
        for name in ["sine-exp-1d", "dette-3d", "friedman-5d"] {
            let b = benchmark(name).unwrap();
            assert!(b.standardize);
            assert!(b.reference_qois.iter().all(|r| r.provenance == Provenance::OracleAuthoritative));
        }
    }

    #[test]
    fn monte_carlo_oracle_is_seeded() {
        let spec = QoiSpec::new(QoiKind::Expectation);
        let a = oracle_qoi("dette-3d", &spec, 20_000, 5).unwrap();
        let b = oracle_qoi("dette-3d", &spec, 20_000, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, Some(5));
    }

    #[test]
    fn report_shape() {
        let configure = |b: &Benchmark| {
            let hmc = HmcConfig { n_samples: 200, burn_in: 100, thin_to: 3, ..HmcConfig::default() };
            CampaignConfig {
                n_initial: 4,
                n_max: 6,
                qoi: QoiSpec { n_inner: 200, ..QoiSpec::new(QoiKind::Expectation) },
                hmc,
                bgo: BgoConfig { n_init: 4, n_total: 6, n_candidates: 40, tol: 1e-6 },
                ekld: EkldConfig { m_posterior: 3, b_hypothetical: 4, s_paths: 6 },
                kle: KleConfig { n_quad: 30, beta: 0.95 },
                standardize_outputs: b.standardize,
                ..CampaignConfig::for_dim(b.dim())
            }
        };
        let report = compare(&["sine-exp-1d"], &[Acquisition::Us], 1, &configure, 1001).unwrap();
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.rows.len(), 2);
        assert!(report.incomplete_cells().is_empty());
        let report = compare(&["sine-exp-1d"], &[Acquisition::Us, Acquisition::Ekld], 2, &configure, 1001).unwrap();
        assert_eq!(report.rows.len(), 2 * 2);
        assert!(report.rows.iter().all(|r| r.n_runs == 2 && r.q25_abs_err <= r.median_abs_err));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
