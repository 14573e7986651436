//! The outer sequential design loop.

pub mod trace;

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{ei_score, us_score, Acquisition, EkldConfig, EkldEvaluator};
use crate::design::{lhs_with, DesignSpace};
use crate::error::{BodeError, Result};
use crate::hmc::{sample, thin, HmcConfig};
use crate::inner_opt::{maximize, BgoConfig, BgoTrace};
use crate::kle::{KleExpansion, DEFAULT_BETA};
use crate::linalg::{mean_and_variance, quantile_sorted};
use crate::nsgp::{Dataset, NsgpConfig, NsgpTarget, ParamLayout, PosteriorSample, DEFAULT_NOISE_VARIANCE};
use crate::qoi::{qoi_draws, InputMeasure, QoiKind, QoiSpec};
use crate::rng::{derive_seed, stream_rng, Stream};

pub use trace::{CampaignTrace, QoiBand, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KleConfig {
    pub n_quad: usize,
    pub beta: f64,
}

impl KleConfig {
    pub fn for_dim(d: usize) -> Self {
        KleConfig { n_quad: if d == 1 { 500 } else { 1000 }, beta: DEFAULT_BETA }
    }

    pub fn desk(d: usize) -> Self {
        KleConfig { n_quad: if d == 1 { 200 } else { 300 }, beta: DEFAULT_BETA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub n_initial: usize,
    /// Total experiment budget, initial design included.
    pub n_max: usize,
    pub acquisition: Acquisition,
    pub qoi: QoiSpec,
    pub hmc: HmcConfig,
    pub bgo: BgoConfig,
    pub ekld: EkldConfig,
    pub kle: KleConfig,
    pub nsgp: NsgpConfig,
    pub standardize_outputs: bool,
    /// Run HMC every `refit_every` iterations; in between, previous draws are
    /// extended to new designs by their latent-GP conditional means.
    pub refit_every: usize,
    pub noise_variance: f64,
    pub seed: u64,
}

impl CampaignConfig {
    pub fn for_dim(d: usize) -> Self {
        CampaignConfig {
            n_initial: 5,
            n_max: 30,
            acquisition: Acquisition::Ekld,
            qoi: QoiSpec::new(QoiKind::Expectation),
            hmc: HmcConfig::default(),
            bgo: BgoConfig::for_dim(d),
            ekld: EkldConfig::default(),
            kle: KleConfig::for_dim(d),
            nsgp: NsgpConfig::for_dim(d),
            standardize_outputs: false,
            refit_every: 1,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            seed: 0,
        }
    }

    /// Reduced HMC and KLE budgets that run on a laptop.
    pub fn desk(d: usize) -> Self {
        let hmc = HmcConfig::desk();
        CampaignConfig {
            hmc,
            kle: KleConfig::desk(d),
            ekld: EkldConfig { m_posterior: hmc.thin_to, ..EkldConfig::default() },
            ..CampaignConfig::for_dim(d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_initial < 1 {
            return Err(BodeError::Argument("n_initial must be at least 1".into()));
        }
        if self.n_max <= self.n_initial {
            return Err(BodeError::Argument(format!(
                "n_max ({}) must exceed n_initial ({})",
                self.n_max, self.n_initial
            )));
        }
        if self.refit_every == 0 {
            return Err(BodeError::Argument("refit_every must be positive".into()));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(BodeError::Argument("noise_variance must be positive".into()));
        }
        if self.kle.n_quad < 2 {
            return Err(BodeError::Argument("kle.n_quad must be at least 2".into()));
        }
        if !(self.kle.beta > 0.0 && self.kle.beta <= 1.0) {
            return Err(BodeError::Argument(format!("kle.beta must lie in (0, 1], got {}", self.kle.beta)));
        }
        if self.ekld.m_posterior != self.hmc.thin_to {
            return Err(BodeError::Argument(format!(
                "ekld.m_posterior ({}) must equal hmc.thin_to ({})",
                self.ekld.m_posterior, self.hmc.thin_to
            )));
        }
        self.qoi.validate()?;
        self.hmc.validate()?;
        self.bgo.validate()?;
        self.ekld.validate()?;
        self.nsgp.prior.validate()
    }
}

/// Sampler state carried between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    /// Number of designs the parameters below were laid out for.
    pub n: usize,
    pub theta: Vec<f64>,
    pub step_size: f64,
    pub thinned: Vec<Vec<f64>>,
}

/// Everything needed to continue a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    /// Observations on the raw output scale at design-space coordinates.
    pub data: Dataset,
    /// Completed acquisition cycles.
    pub iteration: usize,
    pub warm: Option<WarmStart>,
    pub trace: CampaignTrace,
}

/// Affine output map `y_std = (y - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization { center: 0.0, scale: 1.0 };

    pub fn from_data(y: &[f64]) -> Self {
        let (center, var) = mean_and_variance(y);
        let scale = var.sqrt();
        if y.len() < 2 || !(scale > 0.0) {
            return Standardization { center, scale: 1.0 };
        }
        Standardization { center, scale }
    }

    /// Maps a QoI value computed on the standardized scale back to raw.
    pub fn qoi_to_raw(&self, kind: QoiKind, q: f64) -> f64 {
        match kind {
            QoiKind::Variance => q * self.scale * self.scale,
            _ => self.center + self.scale * q,
        }
    }

    pub fn band_to_raw(&self, kind: QoiKind, b: QoiBand) -> QoiBand {
        QoiBand { mean: self.qoi_to_raw(kind, b.mean), lo: self.qoi_to_raw(kind, b.lo), hi: self.qoi_to_raw(kind, b.hi) }
    }
}

/// Posterior fitted to the current data.
pub struct Fit {
    pub samples: Vec<Arc<PosteriorSample>>,
    pub expansions: Vec<Arc<KleExpansion>>,
    pub standardization: Standardization,
    pub warm: WarmStart,
    /// Post-burn-in acceptance rate, when HMC ran this iteration.
    pub accept_rate: Option<f64>,
}

/// The next experiment chosen from the current posterior.
pub struct Proposal {
    /// Design-space coordinates.
    pub x: Vec<f64>,
    pub acq_value: f64,
    pub qoi: QoiBand,
    pub raw_qoi: QoiBand,
    pub bgo: BgoTrace,
    pub fit: Fit,
}

/// Pooled-draw summary: mean and empirical 2.5/97.5 percentiles.
pub fn band_of_draws(draws: &[f64]) -> Result<QoiBand> {
    if draws.is_empty() {
        return Err(BodeError::Argument("no QoI draws to summarize".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let lo = quantile_sorted(&sorted, 0.025);
    let hi = quantile_sorted(&sorted, 0.975);
    // the mean of a sample always lies between its extreme order statistics;
    // pin it into the band against round-off in degenerate samples
    Ok(QoiBand { mean: mean.clamp(lo.min(hi), hi.max(lo)), lo, hi })
}

/// Mixture summary of the QoI: `s_paths` draws per posterior sample, pooled.
pub fn qoi_summary(
    expansions: &[Arc<KleExpansion>],
    spec: &QoiSpec,
    inner_points: &[Vec<f64>],
    s_paths: usize,
    seed: u64,
    iteration: u64,
) -> Result<QoiBand> {
    if expansions.is_empty() {
        return Err(BodeError::Argument("QoI summary needs a posterior sample".into()));
    }
    let per: Vec<Vec<f64>> = expansions
        .par_iter()
        .enumerate()
        .map(|(m, e)| {
            let mut rng = stream_rng(seed, Stream::Summary, &[iteration, m as u64]);
            qoi_draws(e, spec, inner_points, s_paths, &mut rng)
        })
        .collect::<Result<_>>()?;
    band_of_draws(&per.concat())
}

pub type Oracle<'a> = dyn FnMut(&[f64]) -> Result<f64> + 'a;

/// A sequential design campaign. Internally every design is mapped to the
/// unit cube; traces and oracles see design-space coordinates.
pub struct Campaign {
    cfg: CampaignConfig,
    space: DesignSpace,
    unit: DesignSpace,
    spec: QoiSpec,
    inner: Vec<Vec<f64>>,
    state: CampaignState,
}

impl Campaign {
    /// Starts a campaign, querying the oracle on an LHS initial design unless
    /// `init_data` is given.
    pub fn start(
        cfg: CampaignConfig,
        space: DesignSpace,
        oracle: &mut Oracle<'_>,
        init_data: Option<Dataset>,
    ) -> Result<Self> {
        cfg.validate()?;
        let data = match init_data {
            Some(d) => {
                if d.is_empty() {
                    return Err(BodeError::Argument("initial dataset is empty".into()));
                }
                d.check_within(&space)?;
                if d.len() >= cfg.n_max {
                    return Err(BodeError::Argument(format!(
                        "initial dataset ({}) already exhausts n_max ({})",
                        d.len(),
                        cfg.n_max
                    )));
                }
                Dataset::new(d.designs().to_vec(), d.observations().to_vec(), cfg.noise_variance)?
            }
            None => {
                let mut rng = stream_rng(cfg.seed, Stream::InitialDesign, &[]);
                let designs = lhs_with(cfg.n_initial, &space, &mut rng);
                let mut ys = Vec::with_capacity(designs.len());
                for x in &designs {
                    ys.push(query(oracle, x)?);
                }
                Dataset::new(designs, ys, cfg.noise_variance)?
            }
        };
        let state = CampaignState { data, iteration: 0, warm: None, trace: CampaignTrace::default() };
        Campaign::resume(cfg, space, state)
    }

    /// Continues from a saved state.
    pub fn resume(cfg: CampaignConfig, space: DesignSpace, state: CampaignState) -> Result<Self> {
        cfg.validate()?;
        if state.data.is_empty() {
            return Err(BodeError::Argument("campaign state holds no observations".into()));
        }
        state.data.check_within(&space)?;
        let unit = DesignSpace::unit(space.dim());
        let mut spec = cfg.qoi.clone();
        if let InputMeasure::Sample { points } = &mut spec.measure {
            if points.iter().any(|p| !space.contains(p)) {
                return Err(BodeError::Argument("input-measure points must lie in the design space".into()));
            }
            *points = points.iter().map(|p| space.to_unit(p)).collect();
        }
        let inner = spec.inner_points(&unit, cfg.seed);
        Ok(Campaign { cfg, space, unit, spec, inner, state })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.cfg
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn into_state(self) -> CampaignState {
        self.state
    }

    pub fn trace(&self) -> &CampaignTrace {
        &self.state.trace
    }

    pub fn is_done(&self) -> bool {
        self.state.data.len() >= self.cfg.n_max
    }

    /// Inner integration points in unit coordinates.
    pub fn inner_points(&self) -> &[Vec<f64>] {
        &self.inner
    }

    fn standardized(&self) -> Result<(Dataset, Standardization)> {
        let data = &self.state.data;
        let st = if self.cfg.standardize_outputs {
            Standardization::from_data(data.observations())
        } else {
            Standardization::IDENTITY
        };
        let designs = data.designs().iter().map(|x| self.space.to_unit(x)).collect();
        let ys = data.observations().iter().map(|y| (y - st.center) / st.scale).collect();
        Ok((Dataset::new(designs, ys, self.cfg.noise_variance)?, st))
    }

    /// Posterior samples and KLEs for the next iteration. Does not mutate.
    pub fn fit(&self) -> Result<Fit> {
        let iter = (self.state.iteration + 1) as u64;
        let (data, standardization) = self.standardized()?;
        let n = data.len();
        let target = NsgpTarget::new(data.clone(), self.cfg.nsgp)?;
        let layout = target.layout();
        let grow = |w: &WarmStart, t: &[f64]| ParamLayout { n: w.n, ..layout }.grow(t, n);
        let refit = self.state.warm.is_none() || self.state.iteration % self.cfg.refit_every == 0;

        let (warm, accept_rate) = match (&self.state.warm, refit) {
            (Some(w), false) => (
                WarmStart {
                    n,
                    theta: grow(w, &w.theta),
                    step_size: w.step_size,
                    thinned: w.thinned.iter().map(|t| grow(w, t)).collect(),
                },
                None,
            ),
            (prev, _) => {
                let init = prev.as_ref().map_or_else(|| target.initial_point(), |w| grow(w, &w.theta));
                let hmc = HmcConfig {
                    seed: derive_seed(self.cfg.seed, Stream::Hmc, &[iter]),
                    step_size: prev.as_ref().map_or(self.cfg.hmc.step_size, |w| w.step_size),
                    ..self.cfg.hmc
                };
                let chain = sample(&target, &init, &hmc)?;
                let thinned = thin(&chain, hmc.thin_to)?;
                (
                    WarmStart { n, theta: chain.last().to_vec(), step_size: chain.step_size, thinned },
                    Some(chain.accept_rate),
                )
            }
        };

        let samples: Vec<Arc<PosteriorSample>> = warm
            .thinned
            .par_iter()
            .map(|t| {
                let (hp, fields) = target.unpack(t)?;
                PosteriorSample::new(&data, hp, fields, self.cfg.nsgp).map(Arc::new)
            })
            .collect::<Result<_>>()?;

        let mut rng = stream_rng(self.cfg.seed, Stream::Quadrature, &[iter]);
        let quad = lhs_with(self.cfg.kle.n_quad, &self.unit, &mut rng);
        let expansions: Vec<Arc<KleExpansion>> = samples
            .par_iter()
            .map(|s| match KleExpansion::build(s.clone(), quad.clone(), self.cfg.kle.beta) {
                Ok(e) => Ok(Arc::new(e)),
                Err(BodeError::DegeneratePosterior { .. }) => Ok(Arc::new(KleExpansion::mean_only(s.clone(), quad.clone()))),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        Ok(Fit { samples, expansions, standardization, warm, accept_rate })
    }

    /// Chooses the next design without changing the campaign.
    pub fn propose(&self) -> Result<Proposal> {
        let iter = (self.state.iteration + 1) as u64;
        let fit = self.fit()?;
        let qoi = qoi_summary(&fit.expansions, &self.spec, &self.inner, self.cfg.ekld.s_paths, self.cfg.seed, iter)?;
        let raw_qoi = fit.standardization.band_to_raw(self.spec.kind, qoi);
        let bgo_seed = derive_seed(self.cfg.seed, Stream::Bgo, &[iter]);
        let (u, acq_value, bgo) = match self.cfg.acquisition {
            Acquisition::Ekld => {
                let eval = EkldEvaluator::new(&fit.expansions, &self.spec, &self.inner, &self.cfg.ekld, self.cfg.seed, iter)?;
                maximize(|x| eval.score(x).map(|s| s.value), &self.unit, &self.cfg.bgo, bgo_seed)?
            }
            Acquisition::Us => maximize(|x| us_score(x, &fit.samples), &self.unit, &self.cfg.bgo, bgo_seed)?,
            Acquisition::Ei => {
                let st = fit.standardization;
                let best = self
                    .state
                    .data
                    .observations()
                    .iter()
                    .map(|y| (y - st.center) / st.scale)
                    .fold(f64::INFINITY, f64::min);
                maximize(|x| ei_score(x, &fit.samples, best), &self.unit, &self.cfg.bgo, bgo_seed)?
            }
        };
        Ok(Proposal { x: self.space.from_unit(&u), acq_value, qoi, raw_qoi, bgo, fit })
    }

    /// Appends the observation for a proposal and records the trace row.
    pub fn commit(&mut self, proposal: Proposal, y: f64, wall_ms: u64) -> Result<&TraceRecord> {
        if !y.is_finite() {
            return Err(BodeError::Oracle(format!("non-finite observation {y}")));
        }
        self.state.data.push(proposal.x.clone(), y)?;
        self.state.iteration += 1;
        self.state.warm = Some(proposal.fit.warm);
        self.state.trace.records.push(TraceRecord {
            iter: self.state.iteration,
            x: proposal.x,
            y,
            qoi: proposal.qoi,
            acq_value: proposal.acq_value,
            wall_ms,
        });
        self.state.trace.raw_qoi.push(proposal.raw_qoi);
        Ok(self.state.trace.records.last().expect("just pushed"))
    }

    /// Adds an observation made outside the loop; no trace row is written.
    pub fn record_external(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if !self.space.contains(&x) {
            return Err(BodeError::Argument("design lies outside the design space".into()));
        }
        if !y.is_finite() {
            return Err(BodeError::Argument(format!("non-finite observation {y}")));
        }
        self.state.data.push(x, y)
    }

    /// One acquisition-query-append cycle.
    pub fn step(&mut self, oracle: &mut Oracle<'_>) -> Result<&TraceRecord> {
        let t0 = Instant::now();
        let proposal = self.propose()?;
        let y = query(oracle, &proposal.x)?;
        let wall_ms = t0.elapsed().as_millis() as u64;
        self.commit(proposal, y, wall_ms)
    }
}

fn query(oracle: &mut Oracle<'_>, x: &[f64]) -> Result<f64> {
    let y = oracle(x).map_err(|e| match e {
        BodeError::Oracle(m) => BodeError::Oracle(m),
        other => BodeError::Oracle(other.to_string()),
    })?;
    if !y.is_finite() {
        return Err(BodeError::Oracle(format!("oracle returned {y} at {x:?}")));
    }
    Ok(y)
}

/// Runs a full campaign in memory.
pub fn run(
    oracle: &mut Oracle<'_>,
    cfg: &CampaignConfig,
    space: &DesignSpace,
    init_data: Option<Dataset>,
) -> Result<CampaignTrace> {
    let mut c = Campaign::start(cfg.clone(), space.clone(), oracle, init_data)?;
    while !c.is_done() {
        c.step(oracle)?;
    }
    Ok(c.into_state().trace)
}
