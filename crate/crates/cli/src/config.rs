//! Campaign configuration files.
//!
//! A TOML file with optional sections; every key is optional and unknown keys
//! are rejected. Environment variables `BODE_<KEY>` (top level) and
//! `BODE_<SECTION>__<KEY>` override file values. Defaults that depend on the
//! input dimension are filled in once the design space is known.

use std::path::Path;

use bode_core::acquisition::Acquisition;
use bode_core::bench::benchmark;
use bode_core::design::DesignSpace;
use bode_core::nsgp::{GibbsForm, SignalMeanPrior};
use bode_core::qoi::{InputMeasure, QoiKind};
use bode_core::sdoe::CampaignConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "BODE_";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Master seed (default 0).
    pub seed: Option<u64>,
    /// Start from the reduced HMC/KLE presets (default false).
    pub desk_scale: Option<bool>,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub campaign: CampaignSection,
    #[serde(default)]
    pub qoi: QoiSection,
    #[serde(default)]
    pub hmc: HmcSection,
    #[serde(default)]
    pub bgo: BgoSection,
    #[serde(default)]
    pub ekld: EkldSection,
    #[serde(default)]
    pub kle: KleSection,
    #[serde(default)]
    pub model: ModelSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Builtin benchmark name.
    pub benchmark: Option<String>,
    /// External program and arguments.
    pub command: Option<Vec<String>>,
    /// Design-space bounds `[[lo, hi], ...]`; defaults to the benchmark domain.
    pub bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    pub n_initial: Option<usize>,
    pub n_max: Option<usize>,
    pub acquisition: Option<String>,
    pub standardize_outputs: Option<bool>,
    pub refit_every: Option<usize>,
    pub noise_variance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiSection {
    pub kind: Option<String>,
    pub alpha: Option<f64>,
    pub n_inner: Option<usize>,
    /// Explicit equally weighted input measure.
    pub points: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcSection {
    pub n_samples: Option<usize>,
    pub burn_in: Option<usize>,
    pub leapfrog_steps: Option<usize>,
    pub step_size: Option<f64>,
    pub adapt: Option<bool>,
    pub target_accept: Option<f64>,
    pub thin_to: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BgoSection {
    pub n_init: Option<usize>,
    pub n_total: Option<usize>,
    pub n_candidates: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkldSection {
    pub b_hypothetical: Option<usize>,
    pub s_paths: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KleSection {
    pub n_quad: Option<usize>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gibbs_form: Option<String>,
    pub lengthscale_field_mean: Option<f64>,
    pub sample_signal_mean: Option<bool>,
    pub signal_mean: Option<f64>,
    pub signal_mean_variance: Option<f64>,
    pub gamma_shape: Option<f64>,
    pub gamma_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleSpec {
    Benchmark { name: String },
    Command { argv: Vec<String> },
    /// Observations arrive through `record`.
    Manual,
}

/// A fully resolved, validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub campaign: CampaignConfig,
    pub oracle: OracleSpec,
    pub space: DesignSpace,
}

/// Applies `BODE_*` overrides from `vars` to a parsed table.
fn apply_env(table: &mut toml::Table, vars: &[(String, String)]) -> Result<Vec<String>, CliError> {
    let mut applied = Vec::new();
    for (name, raw) in vars {
        let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
        let parts: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if parts.iter().any(String::is_empty) || parts.len() > 2 {
            return Err(CliError::Config(format!("environment {name}: expected BODE_KEY or BODE_SECTION__KEY")));
        }
        // parse as a TOML literal, falling back to a bare string
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let slot = if parts.len() == 2 {
            let section = table
                .entry(parts[0].clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match section {
                toml::Value::Table(t) => t,
                _ => return Err(CliError::Config(format!("environment {name}: '{}' is not a section", parts[0]))),
            }
        } else {
            &mut *table
        };
        slot.insert(parts[parts.len() - 1].clone(), value);
        applied.push(parts.join("."));
    }
    Ok(applied)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line on which `section.key` is set, if it is set in the file.
fn locate(text: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.split_once('.') {
        Some((s, k)) => (s, k),
        None => ("", path),
    };
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        let Some((k, _)) = t.split_once('=') else { continue };
        let k = k.trim();
        if (current == section && k == key) || (current.is_empty() && k == path) {
            return Some(i + 1);
        }
    }
    None
}

/// Loads and resolves a configuration file.
pub fn load(path: &Path, desk_flag: bool, seed_flag: Option<u64>) -> Result<Resolved, CliError> {
    parse(&read(path)?, &path.display().to_string(), &env_vars(), desk_flag, seed_flag)
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: cannot read: {e}", path.display())))
}

pub fn env_vars() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

pub fn parse(
    text: &str,
    origin: &str,
    env: &[(String, String)],
    desk_flag: bool,
    seed_flag: Option<u64>,
) -> Result<Resolved, CliError> {
    parse_with(text, origin, env, desk_flag, seed_flag, None)
}

/// Like [`parse`] but with the oracle replaced by a builtin benchmark.
pub fn parse_for_benchmark(
    text: &str,
    origin: &str,
    env: &[(String, String)],
    desk_flag: bool,
    seed_flag: Option<u64>,
    name: &str,
) -> Result<Resolved, CliError> {
    parse_with(text, origin, env, desk_flag, seed_flag, Some(name))
}

fn parse_with(
    text: &str,
    origin: &str,
    env: &[(String, String)],
    desk_flag: bool,
    seed_flag: Option<u64>,
    benchmark: Option<&str>,
) -> Result<Resolved, CliError> {
    let anchored = |e: toml::de::Error| {
        let line = e.span().map(|s| line_of(text, s.start));
        let msg = e.message().trim().to_string();
        match line {
            Some(l) => CliError::Config(format!("{origin}:{l}: {msg}")),
            None => CliError::Config(format!("{origin}: {msg}")),
        }
    };
    // the file alone first, so that errors point at its lines
    let _: ConfigFile = toml::from_str(text).map_err(anchored)?;
    let mut table: toml::Table = toml::from_str(text).map_err(anchored)?;
    let overridden = apply_env(&mut table, env)?;
    if let Some(name) = benchmark {
        let mut oracle = toml::Table::new();
        oracle.insert("benchmark".into(), toml::Value::String(name.into()));
        table.insert("oracle".into(), toml::Value::Table(oracle));
    }
    let file: ConfigFile = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("environment override: {}", e.message().trim())))?;
    let v = Validator { text, origin, overridden: &overridden };
    resolve(&file, &v, desk_flag, seed_flag)
}

struct Validator<'a> {
    text: &'a str,
    origin: &'a str,
    overridden: &'a [String],
}

impl Validator<'_> {
    fn error(&self, path: &str, msg: impl std::fmt::Display) -> CliError {
        if self.overridden.iter().any(|p| p == path) {
            let var = format!("{ENV_PREFIX}{}", path.replace('.', "__").to_ascii_uppercase());
            return CliError::Config(format!("environment {var}: {path}: {msg}"));
        }
        match locate(self.text, path) {
            Some(l) => CliError::Config(format!("{}:{l}: {path}: {msg}", self.origin)),
            None => CliError::Config(format!("{}: {path}: {msg}", self.origin)),
        }
    }

    fn check(&self, ok: bool, path: &str, msg: impl std::fmt::Display) -> Result<(), CliError> {
        if ok { Ok(()) } else { Err(self.error(path, msg)) }
    }
}

fn resolve(f: &ConfigFile, v: &Validator, desk_flag: bool, seed_flag: Option<u64>) -> Result<Resolved, CliError> {
    let o = &f.oracle;
    let bench = match &o.benchmark {
        Some(name) => Some(benchmark(name).map_err(|e| v.error("oracle.benchmark", e))?),
        None => None,
    };
    v.check(!(bench.is_some() && o.command.is_some()), "oracle.command", "set either oracle.benchmark or oracle.command, not both")?;
    if let Some(argv) = &o.command {
        v.check(!argv.is_empty() && !argv[0].is_empty(), "oracle.command", "command must name a program")?;
    }
    let space = match (&o.bounds, &bench) {
        (Some(b), _) => {
            let bounds: Vec<(f64, f64)> = b.iter().map(|p| (p[0], p[1])).collect();
            let s = DesignSpace::new(bounds).map_err(|e| v.error("oracle.bounds", e))?;
            if let Some(bm) = &bench {
                v.check(s == bm.space, "oracle.bounds", format!("must match the {} domain", bm.name))?;
            }
            s
        }
        (None, Some(bm)) => bm.space.clone(),
        (None, None) => return Err(v.error("oracle.bounds", "required unless oracle.benchmark is set")),
    };
    let d = space.dim();
    let oracle = match (&bench, &o.command) {
        (Some(b), _) => OracleSpec::Benchmark { name: b.name.to_string() },
        (None, Some(argv)) => OracleSpec::Command { argv: argv.clone() },
        (None, None) => OracleSpec::Manual,
    };

    let desk = desk_flag || f.desk_scale.unwrap_or(false);
    let mut c = if desk { CampaignConfig::desk(d) } else { CampaignConfig::for_dim(d) };
    c.seed = seed_flag.or(f.seed).unwrap_or(0);
    c.standardize_outputs = bench.as_ref().is_some_and(|b| b.standardize);

    let s = &f.campaign;
    set(&mut c.n_initial, s.n_initial);
    set(&mut c.n_max, s.n_max);
    set(&mut c.standardize_outputs, s.standardize_outputs);
    set(&mut c.refit_every, s.refit_every);
    set(&mut c.noise_variance, s.noise_variance);
    if let Some(a) = &s.acquisition {
        c.acquisition = a.parse::<Acquisition>().map_err(|e| v.error("campaign.acquisition", e))?;
    }
    v.check(c.n_initial >= 1, "campaign.n_initial", "must be at least 1")?;
    v.check(c.n_max > c.n_initial, "campaign.n_max", format!("must exceed n_initial ({})", c.n_initial))?;
    v.check(c.refit_every >= 1, "campaign.refit_every", "must be at least 1")?;
    v.check(c.noise_variance > 0.0 && c.noise_variance.is_finite(), "campaign.noise_variance", "must be positive")?;

    let q = &f.qoi;
    if let Some(k) = &q.kind {
        c.qoi.kind = parse_kind(k).ok_or_else(|| {
            v.error("qoi.kind", format!("unknown kind '{k}'; use expectation, variance, minimum, maximum or percentile"))
        })?;
    }
    set(&mut c.qoi.alpha, q.alpha);
    set(&mut c.qoi.n_inner, q.n_inner);
    v.check(c.qoi.alpha > 0.0 && c.qoi.alpha < 1.0, "qoi.alpha", format!("must lie in (0, 1), got {}", c.qoi.alpha))?;
    v.check(c.qoi.n_inner >= 2, "qoi.n_inner", "must be at least 2")?;
    if let Some(points) = &q.points {
        v.check(points.len() >= 2, "qoi.points", "need at least two points")?;
        v.check(points.iter().all(|p| p.len() == d && space.contains(p)), "qoi.points", "every point must lie in the design space")?;
        c.qoi.measure = InputMeasure::Sample { points: points.clone() };
    }

    let h = &f.hmc;
    set(&mut c.hmc.n_samples, h.n_samples);
    set(&mut c.hmc.burn_in, h.burn_in);
    set(&mut c.hmc.leapfrog_steps, h.leapfrog_steps);
    set(&mut c.hmc.step_size, h.step_size);
    set(&mut c.hmc.adapt_during_burnin, h.adapt);
    set(&mut c.hmc.target_accept, h.target_accept);
    set(&mut c.hmc.thin_to, h.thin_to);
    v.check(c.hmc.n_samples > c.hmc.burn_in, "hmc.burn_in", format!("must be below n_samples ({})", c.hmc.n_samples))?;
    v.check(c.hmc.leapfrog_steps >= 1, "hmc.leapfrog_steps", "must be at least 1")?;
    v.check(c.hmc.step_size > 0.0 && c.hmc.step_size.is_finite(), "hmc.step_size", "must be positive")?;
    v.check(c.hmc.target_accept > 0.0 && c.hmc.target_accept < 1.0, "hmc.target_accept", "must lie in (0, 1)")?;
    v.check(
        c.hmc.thin_to >= 2 && c.hmc.thin_to <= c.hmc.n_samples - c.hmc.burn_in,
        "hmc.thin_to",
        "must be at least 2 and at most the number of post-burn-in draws",
    )?;
    c.ekld.m_posterior = c.hmc.thin_to;

    let b = &f.bgo;
    set(&mut c.bgo.n_init, b.n_init);
    set(&mut c.bgo.n_total, b.n_total);
    set(&mut c.bgo.n_candidates, b.n_candidates);
    set(&mut c.bgo.tol, b.tol);
    v.check(c.bgo.n_init >= 1, "bgo.n_init", "must be at least 1")?;
    v.check(c.bgo.n_total > c.bgo.n_init, "bgo.n_total", format!("must exceed n_init ({})", c.bgo.n_init))?;
    v.check(c.bgo.n_candidates >= 1, "bgo.n_candidates", "must be at least 1")?;
    v.check(c.bgo.tol > 0.0, "bgo.tol", "must be positive")?;

    let e = &f.ekld;
    set(&mut c.ekld.b_hypothetical, e.b_hypothetical);
    set(&mut c.ekld.s_paths, e.s_paths);
    v.check(c.ekld.b_hypothetical >= 2, "ekld.b_hypothetical", "must be at least 2")?;
    v.check(c.ekld.s_paths >= 2, "ekld.s_paths", "must be at least 2")?;

    let k = &f.kle;
    set(&mut c.kle.n_quad, k.n_quad);
    set(&mut c.kle.beta, k.beta);
    v.check(c.kle.n_quad >= 2, "kle.n_quad", "must be at least 2")?;
    v.check(c.kle.beta > 0.0 && c.kle.beta <= 1.0, "kle.beta", "must lie in (0, 1]")?;

    let m = &f.model;
    if let Some(g) = &m.gibbs_form {
        c.nsgp.gibbs_form = match g.as_str() {
            "verbatim" => GibbsForm::Verbatim,
            "normalized" => GibbsForm::Normalized,
            other => return Err(v.error("model.gibbs_form", format!("unknown form '{other}'; use verbatim or normalized"))),
        };
    }
    let prior = &mut c.nsgp.prior;
    set(&mut prior.lengthscale_field_mean, m.lengthscale_field_mean);
    set(&mut prior.gamma_shape, m.gamma_shape);
    set(&mut prior.gamma_rate, m.gamma_rate);
    let (mut mean, mut variance, mut sampled) = match prior.signal_field_mean {
        SignalMeanPrior::Fixed { value } => (value, 4.0, false),
        SignalMeanPrior::Normal { mean, variance } => (mean, variance, true),
    };
    set(&mut mean, m.signal_mean);
    set(&mut variance, m.signal_mean_variance);
    set(&mut sampled, m.sample_signal_mean);
    prior.signal_field_mean =
        if sampled { SignalMeanPrior::Normal { mean, variance } } else { SignalMeanPrior::Fixed { value: mean } };
    v.check(prior.gamma_shape > 0.0, "model.gamma_shape", "must be positive")?;
    v.check(prior.gamma_rate > 0.0, "model.gamma_rate", "must be positive")?;
    v.check(!sampled || variance > 0.0, "model.signal_mean_variance", "must be positive")?;
    v.check(prior.lengthscale_field_mean.is_finite(), "model.lengthscale_field_mean", "must be finite")?;

    // backstop for anything the field checks above do not cover
    c.validate().map_err(|e| CliError::Config(format!("{}: {e}", v.origin)))?;
    Ok(Resolved { campaign: c, oracle, space })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn parse_kind(s: &str) -> Option<QoiKind> {
    Some(match s {
        "expectation" | "mean" => QoiKind::Expectation,
        "variance" => QoiKind::Variance,
        "minimum" | "min" => QoiKind::Minimum,
        "maximum" | "max" => QoiKind::Maximum,
        "percentile" => QoiKind::Percentile,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(text: &str) -> Resolved {
        parse(text, "c.toml", &[], false, None).unwrap()
    }

    fn err(text: &str) -> String {
        parse(text, "c.toml", &[], false, None).unwrap_err().to_string()
    }

    #[test]
    fn benchmark_defaults() {
        let r = ok("[oracle]\nbenchmark = \"gaussian-mixture-1d\"\n");
        assert_eq!(r.campaign, CampaignConfig::for_dim(1));
        assert_eq!(r.oracle, OracleSpec::Benchmark { name: "gaussian-mixture-1d".into() });
        let r = ok("[oracle]\nbenchmark = \"dette-3d\"\n");
        assert!(r.campaign.standardize_outputs);
        assert_eq!(r.campaign.bgo.n_total, 40);
    }

    #[test]
    fn example_config_matches_defaults() {
        let text = include_str!("../config.example.toml");
        let r = ok(text);
        assert_eq!(r.campaign, CampaignConfig::for_dim(1));
    }

    #[test]
    fn alpha_out_of_range_names_field_and_line() {
        let e = err("[oracle]\nbenchmark = \"sine-exp-1d\"\n\n[qoi]\nkind = \"percentile\"\nalpha = 1.5\n");
        assert!(e.contains("c.toml:6") && e.contains("qoi.alpha"), "{e}");
    }

    #[test]
    fn unknown_key_is_line_anchored() {
        let e = err("seed = 1\n[hmc]\nn_sampels = 10\n");
        assert!(e.contains("c.toml:3") && e.contains("n_sampels"), "{e}");
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("BODE_HMC__N_SAMPLES".to_string(), "9000".to_string()),
            ("BODE_SEED".to_string(), "17".to_string()),
            ("BODE_CAMPAIGN__ACQUISITION".to_string(), "us".to_string()),
        ];
        let r = parse("[oracle]\nbenchmark = \"gaussian-mixture-1d\"\n", "c.toml", &env, false, None).unwrap();
        assert_eq!(r.campaign.hmc.n_samples, 9000);
        assert_eq!(r.campaign.seed, 17);
        assert_eq!(r.campaign.acquisition, Acquisition::Us);
        let bad = vec![("BODE_QOI__ALPHA".to_string(), "2.0".to_string())];
        let e = parse("[oracle]\nbenchmark = \"gaussian-mixture-1d\"\n", "c.toml", &bad, false, None).unwrap_err();
        assert!(e.to_string().contains("BODE_QOI__ALPHA"), "{e}");
    }

    #[test]
    fn desk_flag_and_seed_flag() {
        let r = parse("seed = 3\n[oracle]\nbenchmark = \"gaussian-mixture-1d\"\n", "c", &[], true, Some(9)).unwrap();
        assert_eq!(r.campaign.hmc.n_samples, 1500);
        assert_eq!(r.campaign.ekld.m_posterior, r.campaign.hmc.thin_to);
        assert_eq!(r.campaign.seed, 9);
    }

    #[test]
    fn oracle_variants() {
        let r = ok("[oracle]\ncommand = [\"python3\", \"sim.py\"]\nbounds = [[0.0, 2.0], [1.0, 3.0]]\n");
        assert_eq!(r.space.dim(), 2);
        assert!(matches!(r.oracle, OracleSpec::Command { .. }));
        let r = ok("[oracle]\nbounds = [[0.0, 1.0]]\n");
        assert_eq!(r.oracle, OracleSpec::Manual);
        assert!(err("[campaign]\nn_max = 10\n").contains("oracle.bounds"));
        assert!(err("[oracle]\nbenchmark = \"nope\"\n").contains("c.toml:2"));
        assert!(err("[oracle]\nbounds = [[1.0, 0.0]]\n").contains("oracle.bounds"));
    }

    #[test]
    fn model_section() {
        let r = ok("[oracle]\nbounds = [[0.0, 1.0]]\n[model]\ngibbs_form = \"normalized\"\nsample_signal_mean = false\nsignal_mean = 0.5\n");
        assert_eq!(r.campaign.nsgp.gibbs_form, GibbsForm::Normalized);
        assert_eq!(r.campaign.nsgp.prior.signal_field_mean, SignalMeanPrior::Fixed { value: 0.5 });
    }

    #[test]
    fn type_errors_are_line_anchored() {
        let e = err("[oracle]\nbenchmark = \"gaussian-mixture-1d\"\n[campaign]\nn_max = \"lots\"\n");
        assert!(e.contains("c.toml:4"), "{e}");
    }
}
