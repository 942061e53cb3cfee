//! Cumulative component ablation with median-over-seeds table.
//!
//! cargo run --release --example ablation -- 5 2   # seeds, threads

use kgcm::config::ComponentSet;
use kgcm::data::{generate_synthetic, TextMode};
use kgcm::{benchmark, eval};

fn main() -> kgcm::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let seeds = args.next().flatten().unwrap_or(1) as u64;
    let jobs = args.next().flatten().unwrap_or(1);
    let ds = generate_synthetic(&benchmark::generator(0, TextMode::Full))?;
    let cfg = benchmark::train_config(0, ComponentSet::all());
    let runs = eval::run_ablation(&ds, &cfg, &(0..seeds).collect::<Vec<_>>(), jobs, 1.0)?;
    print!("{}", eval::ablation_csv(&runs));
    let summary = eval::summarize(&runs);
    print!("{}", eval::render_table(&summary));
    println!("inversions,{}", eval::count_inversions(&summary));
    Ok(())
}
