//! The polynomial system behind the over-fitted exponents: print it, check
//! the known solutions, and search for non-trivial solutions.
//!
//! cargo run --release --example polynomial_system

use softmoe::polysys::{
    build_system, evaluate_system, order_three_solution, order_two_solution, residual_norm, search_nontrivial,
    SearchConfig, SearchOutcome,
};
use softmoe::Result;

pub struct Report {
    pub order_two: f64,
    pub order_three: f64,
    pub solvable: SearchOutcome,
    pub unsolvable: SearchOutcome,
}

pub fn run_example(restarts: usize) -> Result<Report> {
    let order_two = residual_norm(&evaluate_system(&build_system(2, 1, 2)?, &order_two_solution())?);
    let order_three = residual_norm(&evaluate_system(&build_system(2, 1, 3)?, &order_three_solution(1))?);
    let cfg = SearchConfig {
        restarts,
        ..SearchConfig::default()
    };
    Ok(Report {
        order_two,
        order_three,
        solvable: search_nontrivial(2, 1, 3, &cfg)?,
        unsolvable: search_nontrivial(2, 1, 4, &cfg)?,
    })
}

fn main() -> Result<()> {
    for eq in &build_system(2, 1, 2)?.equations {
        println!("{}", eq.display());
    }
    let r = run_example(1000)?;
    println!("order-2 solution residual: {:.1e}", r.order_two);
    println!("order-3 solution residual: {:.1e}", r.order_three);
    for (label, out) in [("m=2, r=3", &r.solvable), ("m=2, r=4", &r.unsolvable)] {
        println!("{label}: {} (best residual {:.2e})", out.verdict(), out.best_residual);
    }
    Ok(())
}
