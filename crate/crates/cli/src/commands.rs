use std::collections::HashMap;
use std::fs;
use std::path::Path;

use bode_core::acquisition::Acquisition;
use bode_core::bench::{self, benchmark};
use bode_core::design::lhs_with;
use bode_core::nsgp::Dataset;
use bode_core::qoi::QoiSpec;
use bode_core::rng::{stream_rng, Stream};
use bode_core::sdoe::trace::{write_raw_qoi, write_trace, TraceRecord};
use bode_core::sdoe::{Campaign, CampaignState, CampaignTrace};

use crate::config::{self, parse_kind, Resolved};
use crate::error::CliError;
use crate::oracle;
use crate::store::{Lock, Manifest, StateDir, Status};

fn fmt_row(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn report(r: &TraceRecord) {
    println!(
        "iter {:>3}  x = [{}]  y = {:.6}  qoi = {:.6} [{:.6}, {:.6}]  acq = {:.3e}  {} ms",
        r.iter,
        fmt_row(&r.x),
        r.y,
        r.qoi.mean,
        r.qoi.lo,
        r.qoi.hi,
        r.acq_value,
        r.wall_ms
    );
}

/// Steps the campaign, saving after every cycle. Oracle failures mark the
/// campaign aborted with the last complete state on disk.
fn drive(dir: &StateDir, manifest: &mut Manifest, state: Option<CampaignState>, max: Option<usize>) -> Result<(), CliError> {
    let cfg = manifest.config.campaign.clone();
    let space = manifest.config.space.clone();
    let mut f = oracle::build(&manifest.config.oracle)?;
    manifest.status = Status::Running;
    dir.save_manifest(manifest)?;

    let started = match state {
        Some(s) => Campaign::resume(cfg, space, s),
        None => Campaign::start(cfg, space, &mut *f, None),
    };
    let mut campaign = match started {
        Ok(c) => c,
        Err(e) => {
            manifest.status = Status::Aborted;
            dir.save_manifest(manifest)?;
            return Err(e.into());
        }
    };
    dir.save(manifest, campaign.state())?;

    let mut done = 0;
    while !campaign.is_done() && max.is_none_or(|m| done < m) {
        match campaign.step(&mut *f) {
            Ok(r) => report(r),
            Err(e) => {
                manifest.status = Status::Aborted;
                dir.save(manifest, campaign.state())?;
                return Err(e.into());
            }
        }
        dir.save(manifest, campaign.state())?;
        done += 1;
    }
    if campaign.is_done() {
        manifest.status = Status::Done;
        dir.save_manifest(manifest)?;
        if let Some(r) = campaign.trace().last() {
            println!("final qoi = {:.6} [{:.6}, {:.6}]", r.qoi.mean, r.qoi.lo, r.qoi.hi);
        }
    }
    Ok(())
}

pub fn run(
    config_path: &Path,
    out: &Path,
    desk: bool,
    seed: Option<u64>,
    resume_existing: bool,
    max: Option<usize>,
) -> Result<(), CliError> {
    let dir = StateDir::new(out);
    if dir.exists() {
        if !resume_existing {
            return Err(CliError::Usage(format!(
                "{} already holds a campaign; pass --resume or use `bode resume`",
                out.display()
            )));
        }
        return resume(out, max);
    }
    let resolved = config::load(config_path, desk, seed)?;
    dir.create()?;
    let _lock = Lock::acquire(out)?;
    let mut manifest = Manifest::new(resolved);
    drive(&dir, &mut manifest, None, max)
}

pub fn resume(out: &Path, max: Option<usize>) -> Result<(), CliError> {
    let dir = StateDir::new(out);
    let _lock = Lock::acquire(out)?;
    let (mut manifest, state) = dir.load()?;
    if manifest.status == Status::Done {
        println!("campaign in {} is already complete", out.display());
        return Ok(());
    }
    // a manual campaign's state may hold fewer points than the initial design
    let state = state.filter(|s| !s.data.is_empty());
    drive(&dir, &mut manifest, state, max)
}

/// Loads an existing campaign directory or initializes one from `config`.
fn open_or_init(
    dir: &StateDir,
    config_path: Option<&Path>,
    desk: bool,
    seed: Option<u64>,
) -> Result<(Manifest, CampaignState), CliError> {
    if dir.exists() {
        if config_path.is_some() {
            eprintln!("bode: warning: {} already exists; --config is ignored", dir.root().display());
        }
        let (m, state) = dir.load()?;
        let state = match state {
            Some(s) => s,
            None => empty_state(&m.config)?,
        };
        return Ok((m, state));
    }
    let Some(path) = config_path else {
        return Err(CliError::Usage(format!(
            "{} holds no campaign; pass --config to create one",
            dir.root().display()
        )));
    };
    let resolved = config::load(path, desk, seed)?;
    let state = empty_state(&resolved)?;
    Ok((Manifest::new(resolved), state))
}

fn empty_state(r: &Resolved) -> Result<CampaignState, CliError> {
    Ok(CampaignState {
        data: Dataset::empty(r.campaign.noise_variance)?,
        iteration: 0,
        warm: None,
        trace: CampaignTrace::default(),
    })
}

pub fn suggest(out: &Path, config_path: Option<&Path>, desk: bool, seed: Option<u64>) -> Result<(), CliError> {
    let dir = StateDir::new(out);
    let (manifest, state) = open_or_init(&dir, config_path, desk, seed)?;
    let cfg = &manifest.config.campaign;
    let space = &manifest.config.space;
    let n = state.data.len();
    let x = if n < cfg.n_initial {
        // the initial Latin hypercube, handed out one point at a time
        let mut rng = stream_rng(cfg.seed, Stream::InitialDesign, &[]);
        lhs_with(cfg.n_initial, space, &mut rng).swap_remove(n)
    } else {
        if n >= cfg.n_max {
            eprintln!("bode: warning: budget of {} observations is exhausted", cfg.n_max);
        }
        let campaign = Campaign::resume(cfg.clone(), space.clone(), state)?;
        campaign.propose()?.x
    };
    println!("{}", fmt_row(&x));
    Ok(())
}

fn parse_design(s: &str, dim: usize) -> Result<Vec<f64>, CliError> {
    let x = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("--x: bad coordinate '{}'", t.trim()))))
        .collect::<Result<Vec<_>, _>>()?;
    if x.len() != dim {
        return Err(CliError::Usage(format!("--x: expected {dim} coordinates, got {}", x.len())));
    }
    Ok(x)
}

pub fn record(
    out: &Path,
    x: &str,
    y: f64,
    config_path: Option<&Path>,
    desk: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let dir = StateDir::new(out);
    let (mut manifest, mut state) = open_or_init(&dir, config_path, desk, seed)?;
    let x = parse_design(x, manifest.config.space.dim())?;
    if !manifest.config.space.contains(&x) {
        return Err(CliError::Usage(format!("--x: [{}] lies outside the design space", fmt_row(&x))));
    }
    if !y.is_finite() {
        return Err(CliError::Usage(format!("--y: non-finite observation {y}")));
    }
    if state.data.designs().iter().any(|d| d == &x) {
        eprintln!("bode: warning: design [{}] was already observed; recording a replicate", fmt_row(&x));
    }
    dir.create()?;
    let _lock = Lock::acquire(out)?;
    state.data.push(x, y)?;
    if state.data.len() >= manifest.config.campaign.n_max {
        manifest.status = Status::Done;
    }
    dir.save(&mut manifest, &state)?;
    println!("recorded observation {} of {}", state.data.len(), manifest.config.campaign.n_max);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn compare(
    config_path: &Path,
    out: &Path,
    benchmarks: &[String],
    acquisitions: &[String],
    replications: usize,
    n_oracle: usize,
    desk: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let text = config::read(config_path)?;
    let env = config::env_vars();
    let origin = config_path.display().to_string();
    let mut configs = HashMap::new();
    for name in benchmarks {
        let r = config::parse_for_benchmark(&text, &origin, &env, desk, seed, name)?;
        configs.insert(name.clone(), r.campaign);
    }
    let acqs = acquisitions
        .iter()
        .map(|a| a.parse::<Acquisition>().map_err(|_| CliError::Usage(format!("--acquisitions: unknown '{a}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<&str> = benchmarks.iter().map(String::as_str).collect();
    let configure = |b: &bench::Benchmark| configs[b.name].clone();
    let report = bench::compare(&names, &acqs, replications, &configure, n_oracle)?;

    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    fs::write(out.join("report.csv"), buf)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    for run in &report.runs {
        let stem = format!("{}_{}_{}", run.benchmark, run.acquisition, run.replication);
        match &run.outcome {
            Ok(trace) => {
                let d = trace.records.first().map_or(1, |r| r.x.len());
                let mut buf = Vec::new();
                write_trace(&mut buf, d, &trace.records)?;
                fs::write(runs_dir.join(format!("{stem}.csv")), buf)?;
                let mut buf = Vec::new();
                write_raw_qoi(&mut buf, &trace.records, &trace.raw_qoi)?;
                fs::write(runs_dir.join(format!("{stem}_raw.csv")), buf)?;
            }
            Err(msg) => eprintln!("bode: warning: {stem} failed: {msg}"),
        }
    }
    for (name, value) in &report.oracle {
        for a in &acqs {
            match report.final_median(name, *a) {
                Some(m) => println!("{name:<22} {a:<5} oracle {value:.6}  final median |error| {m:.6}"),
                None => println!("{name:<22} {a:<5} oracle {value:.6}  no completed runs"),
            }
        }
    }
    let incomplete = report.incomplete_cells();
    if !incomplete.is_empty() {
        let cells: Vec<String> = incomplete.iter().map(|(b, a)| format!("{b}/{a}")).collect();
        return Err(CliError::Failed(format!("runs failed in: {}", cells.join(", "))));
    }
    Ok(())
}

pub fn oracle_qoi(name: &str, kind: &str, alpha: f64, n: usize, seed: u64) -> Result<(), CliError> {
    let kind = parse_kind(kind).ok_or_else(|| CliError::Usage(format!("--kind: unknown QoI '{kind}'")))?;
    let spec = QoiSpec { alpha, ..QoiSpec::new(kind) };
    benchmark(name)?;
    let q = bench::oracle_qoi(name, &spec, n, seed)?;
    println!("{}", q.value);
    Ok(())
}
