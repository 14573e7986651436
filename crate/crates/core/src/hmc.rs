//! Hamiltonian Monte Carlo with a diagonal mass matrix and dual-averaging
//! step-size adaptation during burn-in.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BodeError, Result};
use crate::nsgp::NsgpTarget;
use crate::rng::{stream_rng, Stream};

/// Energy error beyond which a trajectory counts as divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Differentiable log density.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64>;
}

impl LogDensity for NsgpTarget {
    fn dim(&self) -> usize {
        NsgpTarget::dim(self)
    }

    fn log_density_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        NsgpTarget::log_density_and_gradient(self, theta, grad)
    }
}

/// Adapts a closure `theta, grad -> log p` into a [`LogDensity`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F> FnDensity<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnDensity { dim, f }
    }
}

impl<F> LogDensity for FnDensity<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        let v = (self.f)(theta, grad);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(BodeError::Domain("log density is not finite".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    pub leapfrog_steps: usize,
    /// Initial step size; adapted during burn-in when enabled.
    pub step_size: f64,
    pub adapt_during_burnin: bool,
    pub target_accept: f64,
    pub thin_to: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            n_samples: 11_500,
            burn_in: 1_500,
            leapfrog_steps: 10,
            step_size: 0.05,
            adapt_during_burnin: true,
            target_accept: 0.75,
            thin_to: 50,
            seed: 0,
        }
    }
}

impl HmcConfig {
    /// Reduced budget for tests and laptops.
    pub fn desk() -> Self {
        HmcConfig { n_samples: 1_500, burn_in: 500, thin_to: 20, ..HmcConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.leapfrog_steps == 0 || self.thin_to == 0 {
            return Err(BodeError::Argument("n_samples, leapfrog_steps and thin_to must be positive".into()));
        }
        if self.burn_in >= self.n_samples {
            return Err(BodeError::Argument(format!(
                "burn_in ({}) must be below n_samples ({})",
                self.burn_in, self.n_samples
            )));
        }
        if self.thin_to > self.n_samples - self.burn_in {
            return Err(BodeError::Argument("thin_to exceeds the number of post-burn-in draws".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(BodeError::Argument("step_size must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(BodeError::Argument("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Output of one sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    /// Acceptance rate after burn-in.
    pub accept_rate: f64,
    pub burn_in: usize,
    /// Step size in force after burn-in.
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub divergent: usize,
}

impl Chain {
    pub fn post_burn_in(&self) -> &[Vec<f64>] {
        &self.draws[self.burn_in..]
    }

    pub fn last(&self) -> &[f64] {
        self.draws.last().expect("chain is never empty")
    }
}

/// `m` evenly spaced post-burn-in draws, last draw included.
pub fn thin(chain: &Chain, m: usize) -> Result<Vec<Vec<f64>>> {
    let post = chain.post_burn_in();
    Ok(thin_indices(post.len(), m)?.into_iter().map(|i| post[i].clone()).collect())
}

/// Indices `floor((i+1) n / m) - 1` for `i < m`.
pub fn thin_indices(n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(BodeError::Argument(format!("cannot thin {n} draws to {m}")));
    }
    Ok((0..m).map(|i| (i + 1) * n / m - 1).collect())
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        DualAveraging { mu: (10.0 * eps).ln(), h_bar: 0.0, log_eps_bar: eps.ln(), t: 0.0, target }
    }

    /// Returns the next step size.
    fn update(&mut self, accept: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct State {
    q: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

struct Leapfrog<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    inv_mass: &'a [f64],
}

impl<T: LogDensity + ?Sized> Leapfrog<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(self.inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    /// Integrates `steps` leapfrog steps; `None` if the trajectory left the
    /// support or produced non-finite values.
    fn integrate(&self, start: &State, p: &mut [f64], eps: f64, steps: usize) -> Option<State> {
        let mut q = start.q.clone();
        let mut grad = start.grad.clone();
        let mut lp = start.lp;
        for k in 0..p.len() {
            p[k] += 0.5 * eps * grad[k];
        }
        for step in 0..steps {
            for k in 0..q.len() {
                q[k] += eps * self.inv_mass[k] * p[k];
            }
            lp = self.target.log_density_and_gradient(&q, &mut grad).ok()?;
            let scale = if step + 1 == steps { 0.5 } else { 1.0 };
            for k in 0..p.len() {
                p[k] += scale * eps * grad[k];
            }
        }
        if !lp.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(State { q, grad, lp })
    }
}

fn draw_momentum(rng: &mut ChaCha8Rng, inv_mass: &[f64]) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            z / m.sqrt()
        })
        .collect()
}

/// Acceptance probability of a single trajectory (0 when divergent).
fn transition(
    lf: &Leapfrog<'_, impl LogDensity + ?Sized>,
    state: &State,
    rng: &mut ChaCha8Rng,
    eps: f64,
    steps: usize,
) -> (Option<State>, f64, bool) {
    let mut p = draw_momentum(rng, lf.inv_mass);
    let h0 = -state.lp + lf.kinetic(&p);
    match lf.integrate(state, &mut p, eps, steps) {
        Some(next) => {
            let h1 = -next.lp + lf.kinetic(&p);
            let delta = h1 - h0;
            if !delta.is_finite() || delta > DIVERGENCE_THRESHOLD {
                (None, 0.0, true)
            } else {
                (Some(next), (-delta).exp().min(1.0), false)
            }
        }
        None => (None, 0.0, true),
    }
}

/// Doubles or halves `eps` until a one-step trajectory's acceptance crosses 1/2.
fn reasonable_step(lf: &Leapfrog<'_, impl LogDensity + ?Sized>, state: &State, rng: &mut ChaCha8Rng, eps: f64) -> f64 {
    let mut eps = eps;
    let (_, a, _) = transition(lf, state, rng, eps, 1);
    let up = a > 0.5;
    for _ in 0..50 {
        let (_, a, _) = transition(lf, state, rng, eps, 1);
        if up && a <= 0.5 {
            eps *= 0.5;
            break;
        }
        if !up && a > 0.5 {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
        if !(1e-8..=1e3).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-8, 1e3)
}

/// Runs one chain from `init`.
pub fn sample<T: LogDensity + ?Sized>(target: &T, init: &[f64], cfg: &HmcConfig) -> Result<Chain> {
    cfg.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(BodeError::Argument(format!("initial point has length {}, target has {d}", init.len())));
    }
    let mut grad = vec![0.0; d];
    let lp = target
        .log_density_and_gradient(init, &mut grad)
        .map_err(|e| BodeError::Argument(format!("log density not finite at the initial point: {e}")))?;
    let mut state = State { q: init.to_vec(), grad, lp };
    let mut rng = stream_rng(cfg.seed, Stream::Hmc, &[]);
    let mut inv_mass = vec![1.0; d];
    let adapt = cfg.adapt_during_burnin && cfg.burn_in > 0;

    let mut eps = cfg.step_size;
    if adapt {
        let lf = Leapfrog { target, inv_mass: &inv_mass };
        eps = reasonable_step(&lf, &state, &mut rng, eps);
    }
    let mut da = DualAveraging::new(eps, cfg.target_accept);

    let window = (cfg.burn_in / 2, cfg.burn_in * 3 / 4);
    let mut window_draws: Vec<Vec<f64>> = Vec::new();

    let mut draws = Vec::with_capacity(cfg.n_samples);
    let mut log_densities = Vec::with_capacity(cfg.n_samples);
    let mut accepted_post = 0usize;
    let mut divergent = 0usize;
    let mut divergent_burn = 0usize;

    for i in 0..cfg.n_samples {
        let burning = i < cfg.burn_in;
        let jitter = 1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0);
        let (next, accept_prob, div) = {
            let lf = Leapfrog { target, inv_mass: &inv_mass };
            transition(&lf, &state, &mut rng, eps * jitter, cfg.leapfrog_steps)
        };
        let u: f64 = rng.random();
        let accepted = match next {
            Some(next) if u < accept_prob => {
                state = next;
                true
            }
            _ => false,
        };
        if div {
            divergent += 1;
            if burning {
                divergent_burn += 1;
                if divergent_burn * 2 > cfg.burn_in {
                    return Err(BodeError::Sampler { divergent: divergent_burn, burn_in: cfg.burn_in });
                }
                if !adapt {
                    eps *= 0.5;
                }
            }
        }
        if !burning && accepted {
            accepted_post += 1;
        }

        if burning && adapt {
            eps = da.update(accept_prob);
            if i >= window.0 && i < window.1 {
                window_draws.push(state.q.clone());
            }
            if i + 1 == window.1 && window_draws.len() >= 10 {
                inv_mass = regularized_variance(&window_draws);
                window_draws.clear();
                let lf = Leapfrog { target, inv_mass: &inv_mass };
                eps = reasonable_step(&lf, &state, &mut rng, eps);
                da = DualAveraging::new(eps, cfg.target_accept);
            }
            if i + 1 == cfg.burn_in {
                eps = da.final_step();
            }
        }

        draws.push(state.q.clone());
        log_densities.push(state.lp);
    }

    let post = cfg.n_samples - cfg.burn_in;
    Ok(Chain {
        draws,
        log_densities,
        accept_rate: accepted_post as f64 / post as f64,
        burn_in: cfg.burn_in,
        step_size: eps,
        inv_mass,
        divergent,
    })
}

/// Per-coordinate sample variance shrunk toward 1e-3.
fn regularized_variance(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.len() as f64;
    let d = draws[0].len();
    (0..d)
        .map(|k| {
            let col: Vec<f64> = draws.iter().map(|q| q[k]).collect();
            let var = crate::linalg::mean_and_variance(&col).1;
            let v = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            v.max(1e-8)
        })
        .collect()
}
