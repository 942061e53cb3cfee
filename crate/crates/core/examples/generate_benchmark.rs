//! Generates the synthetic benchmark and writes it as CSV.
//!
//! cargo run --example generate_benchmark -- /tmp/kgcm-data

use kgcm::benchmark;
use kgcm::data::{generate_with_events, write_dataset, TextMode};

fn main() -> kgcm::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "kgcm-data".into());
    let synth = generate_with_events(&benchmark::generator(0, TextMode::Full))?;
    let ds = &synth.dataset;
    write_dataset(ds, dir.as_ref())?;

    let texts = ds.regions.iter().map(|r| r.local_text.iter().filter(|t| !t.is_empty()).count()).sum::<usize>();
    println!("regions,{}", ds.regions.len());
    println!("rows,{}", ds.num_rows());
    println!("event_slots,{}", synth.event_slots.iter().flatten().filter(|e| **e).count());
    println!("local_texts,{texts}");
    println!("global_texts,{}", ds.global_text.len());
    if let Some(text) = ds.regions[0].local_text.iter().find(|t| !t.is_empty()) {
        println!("example_text,{text}");
    }
    Ok(())
}
