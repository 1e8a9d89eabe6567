//! Sample from a two-expert model and recover it by EM.
//!
//! cargo run --release --example generate_and_fit

use softmoe::estimator::{fit_mle, FitConfig, FitResult};
use softmoe::experiments::well_separated_fixture;
use softmoe::model::ThetaBox;
use softmoe::Result;

pub fn run_example(n: usize) -> Result<FitResult> {
    let truth = well_separated_fixture();
    let theta = ThetaBox::new(1);
    let data = truth.sample(&theta.covariates, n, 42)?;
    let cfg = FitConfig {
        k: 2,
        restarts: 4,
        seed: 7,
        ..FitConfig::default()
    };
    fit_mle(&data, &theta, &cfg)
}

fn main() -> Result<()> {
    let fit = run_example(5000)?;
    println!(
        "loglik {:.4} after {} iterations (restart {}, converged {})",
        fit.final_loglik, fit.iterations, fit.restart, fit.converged
    );
    for c in fit.measure.components() {
        println!(
            "beta0 {:+.3} beta1 {:+.3} a {:+.3} b {:+.3} sigma {:.3}",
            c.beta0, c.beta1[0], c.a[0], c.b, c.sigma
        );
    }
    Ok(())
}
