//! Exact- and over-fitted Voronoi losses against a reference measure.
//!
//! cargo run --example voronoi_losses

use softmoe::experiments::well_separated_fixture;
use softmoe::model::MixingMeasure;
use softmoe::voronoi::{loss_d1, loss_d2, LossValue, TranslationSolverConfig};
use softmoe::Result;

pub struct Losses {
    pub translated: LossValue,
    pub perturbed: LossValue,
    pub split: LossValue,
}

pub fn run_example() -> Result<Losses> {
    let truth = well_separated_fixture();
    let cfg = TranslationSolverConfig::default();

    // Same model, different gating parametrisation: the loss is ~0.
    let translated = loss_d1(&truth.translate(0.5, &[0.2])?, &truth, &cfg)?;

    let mut comps = truth.clone().into_components();
    comps[0].b += 0.05;
    comps[1].a[0] -= 0.05;
    let perturbed = loss_d1(&MixingMeasure::new(comps)?, &truth, &cfg)?;

    // Three atoms for two: the first expert is split in two.
    let mut comps = truth.clone().into_components();
    let mut twin = comps[0].clone();
    comps[0].beta0 -= 2f64.ln();
    comps[0].b += 0.1;
    twin.beta0 -= 2f64.ln();
    twin.b -= 0.1;
    comps.push(twin);
    let split = loss_d2(&MixingMeasure::new(comps)?, &truth, &cfg)?;

    Ok(Losses {
        translated,
        perturbed,
        split,
    })
}

fn main() -> Result<()> {
    let l = run_example()?;
    println!("d1, translated copy:  {:.3e}", l.translated.value);
    println!("d1, perturbed experts: {:.3e}", l.perturbed.value);
    println!(
        "d2, split atom:        {:.3e} (cells {:?})",
        l.split.value, l.split.assignment.cells
    );
    Ok(())
}
