//! Hellinger and total-variation distances between two fitted models.
//!
//! cargo run --release --example divergences

use softmoe::divergence::{divergences, Divergences, QuadratureSpec};
use softmoe::experiments::well_separated_fixture;
use softmoe::model::{Interval, MixingMeasure};
use softmoe::Result;

pub fn run_example() -> Result<Divergences> {
    let g = well_separated_fixture();
    let mut comps = g.clone().into_components();
    comps[0].b += 0.2;
    let h = MixingMeasure::new(comps)?;
    let spec = QuadratureSpec::new(vec![Interval::new(-1.0, 1.0)?]);
    divergences(&g, &h, &spec)
}

fn main() -> Result<()> {
    let d = run_example()?;
    println!("h^2 = {:.5} +- {:.1e}", d.hellinger_sq.value, d.hellinger_sq.se);
    println!("V   = {:.5} +- {:.1e}", d.total_variation.value, d.total_variation.se);
    println!("V <= sqrt(2) h: {}", d.total_variation.value <= 2f64.sqrt() * d.hellinger_sq.value.sqrt());
    Ok(())
}
