//! Translating every gating bias by `t1` and every gating slope by `t2`
//! leaves the conditional density unchanged.
//!
//! cargo run --example identifiability

use softmoe::experiments::well_separated_fixture;
use softmoe::Result;

pub fn run_example() -> Result<f64> {
    let g = well_separated_fixture();
    let shifted = g.translate(1.5, &[-0.75])?;
    let mut worst = 0.0f64;
    for i in 0..=20 {
        let x = -1.0 + 0.1 * i as f64;
        for j in 0..=40 {
            let y = -4.0 + 0.2 * j as f64;
            let diff = (g.conditional_density(&[x], y)? - shifted.conditional_density(&[x], y)?).abs();
            worst = worst.max(diff);
        }
    }
    Ok(worst)
}

fn main() -> Result<()> {
    let worst = run_example()?;
    println!("max |g_G - g_translated| over the grid: {worst:.3e}");
    Ok(())
}
