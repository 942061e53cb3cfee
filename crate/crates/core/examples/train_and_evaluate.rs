//! Fits the full model on the benchmark and scores the test split.

use kgcm::config::ComponentSet;
use kgcm::data::{generate_synthetic, Split, TextMode};
use kgcm::{benchmark, eval, fit};

fn main() -> kgcm::Result<()> {
    let ds = generate_synthetic(&benchmark::generator(0, TextMode::Full))?;
    let cfg = benchmark::train_config(0, ComponentSet::all());
    let model = fit(&ds, &cfg)?;
    let report = eval::evaluate(&model, &ds, Split::Test, 1.0)?;
    print!("{}", report.metrics_csv());
    Ok(())
}
