//! Runs every cargo example's `run_example` so they stay correct.
#![allow(dead_code)]

#[path = "../examples/convergence_rates.rs"]
mod convergence_rates;
#[path = "../examples/divergences.rs"]
mod divergences;
#[path = "../examples/file_formats.rs"]
mod file_formats;
#[path = "../examples/generate_and_fit.rs"]
mod generate_and_fit;
#[path = "../examples/identifiability.rs"]
mod identifiability;
#[path = "../examples/polynomial_system.rs"]
mod polynomial_system;
#[path = "../examples/voronoi_losses.rs"]
mod voronoi_losses;

use softmoe::experiments::Regime;

#[test]
fn identifiability_example() {
    assert!(identifiability::run_example().unwrap() < 1e-12);
}

#[test]
fn generate_and_fit_example() {
    let fit = generate_and_fit::run_example(3000).unwrap();
    let mut slopes: Vec<f64> = fit.measure.components().iter().map(|c| c.a[0]).collect();
    slopes.sort_by(f64::total_cmp);
    assert!((slopes[0] + 1.0).abs() < 0.15 && (slopes[1] - 1.0).abs() < 0.15, "{slopes:?}");
}

#[test]
fn voronoi_losses_example() {
    let l = voronoi_losses::run_example().unwrap();
    assert!(l.translated.value < 1e-3);
    assert!(l.perturbed.value > 0.01);
    assert_eq!(l.split.assignment.cells[0].len(), 2);
}

#[test]
fn polynomial_system_example() {
    let r = polynomial_system::run_example(300).unwrap();
    assert!(r.order_two < 1e-14 && r.order_three < 1e-14);
    assert!(r.solvable.solution.is_some());
    assert!(r.unsolvable.solution.is_none());
}

#[test]
fn divergences_example() {
    let d = divergences::run_example().unwrap();
    assert!(d.hellinger_sq.value > 0.0 && d.total_variation.value > d.hellinger_sq.value);
}

#[test]
fn convergence_rates_example() {
    let res = convergence_rates::run_example(Regime::Exact).unwrap();
    assert_eq!(res.rows.len(), 16);
    assert!(res.quantity("d1").unwrap().fit.slope < 0.0);
}

#[test]
fn file_formats_example() {
    let (doc, ok) = file_formats::run_example().unwrap();
    assert!(doc.starts_with("format=1\n"));
    assert!(ok);
}
