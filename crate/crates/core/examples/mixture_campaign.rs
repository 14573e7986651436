//! Desk-scale EKLD campaign on the Gaussian-mixture benchmark.
//!
//! cargo run --release -p bode-core --example mixture_campaign -- [seed]

use std::time::Instant;

use bode_core::bench::benchmark;
use bode_core::sdoe::{run, CampaignConfig};

fn main() -> bode_core::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let b = benchmark("gaussian-mixture-1d")?;
    let cfg = CampaignConfig { n_initial: 5, n_max: 30, seed, ..CampaignConfig::desk(1) };
    let t0 = Instant::now();
    let trace = run(&mut |x| b.eval(x), &cfg, &b.space, None)?;
    println!("iter,x,y,qoi_mean,qoi_lo,qoi_hi,acq,wall_ms");
    for r in &trace.records {
        println!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.3e},{}",
            r.iter, r.x[0], r.y, r.qoi.mean, r.qoi.lo, r.qoi.hi, r.acq_value, r.wall_ms
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
