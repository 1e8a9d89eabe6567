//! A small convergence-rate experiment. The full-size run is
//! `softmoe experiment --out DIR` (20 replicates, n up to 32000).
//!
//! cargo run --release --example convergence_rates [out_dir]

use std::path::PathBuf;

use softmoe::experiments::{run_experiment, ExperimentConfig, RateResult, Regime};
use softmoe::Result;

pub fn run_example(regime: Regime) -> Result<RateResult> {
    let mut cfg = ExperimentConfig::new(regime);
    cfg.n_grid = vec![250, 500, 1000, 2000];
    cfg.replicates = 4;
    cfg.fit.restarts = 2;
    cfg.fit.max_em_iters = 100;
    cfg.quadrature.x_samples = 100;
    cfg.seed = 3;
    run_experiment(&cfg)
}

fn main() -> Result<()> {
    let res = run_example(Regime::Exact)?;
    for q in &res.quantities {
        println!("{:<10} slope {:+.3} (R^2 {:.2})", q.name, q.fit.slope, q.fit.r2);
    }
    if let Some(dir) = std::env::args().nth(1) {
        res.write_to_dir(&PathBuf::from(dir))?;
    }
    Ok(())
}
