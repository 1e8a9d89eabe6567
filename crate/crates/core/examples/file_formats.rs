//! Write a measure document and a dataset, then read both back.
//!
//! cargo run --example file_formats

use softmoe::experiments::well_separated_fixture;
use softmoe::io::{parse_dataset, parse_measure, write_dataset, write_measure};
use softmoe::model::Interval;
use softmoe::Result;

pub fn run_example() -> Result<(String, bool)> {
    let g = well_separated_fixture();
    let doc = write_measure(&g);
    let same_measure = parse_measure(&doc)? == g;

    let data = g.sample(&[Interval::new(-1.0, 1.0)?], 5, 1)?;
    let mut csv = Vec::new();
    write_dataset(&data, &mut csv)?;
    let same_data = parse_dataset(&String::from_utf8(csv).expect("utf-8"))? == {
        let mut d = data.clone();
        d.seed = None;
        d
    };
    Ok((doc, same_measure && same_data))
}

fn main() -> Result<()> {
    let (doc, ok) = run_example()?;
    print!("{doc}");
    println!("round trip exact: {ok}");
    Ok(())
}
