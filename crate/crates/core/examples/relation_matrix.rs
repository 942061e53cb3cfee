//! Learned feature graph on one window: raw and time-smoothed relation
//! matrices, and the bias they induce in the encoder.

use kgcm::autodiff::Tape;
use kgcm::config::ComponentSet;
use kgcm::data::{generate_synthetic, Split, TextMode};
use kgcm::model::{dgso, forward_local, ssa};
use kgcm::params::Binder;
use kgcm::{benchmark, fit};

fn main() -> kgcm::Result<()> {
    let ds = generate_synthetic(&benchmark::generator(0, TextMode::Full))?;
    let mut cfg = benchmark::train_config(0, ComponentSet::all());
    cfg.epochs_stage2 = 1;
    let model = fit(&ds, &cfg)?;
    let prepared = model.prepare(&ds)?;
    let window = &prepared.windows(Split::Test)?[0];

    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, None);
    let local = forward_local(&mut tape, &mut binder, &model.config, model.config.components, window)?;
    let out = local.dgso.expect("graph stage on");
    let d = model.config.d;
    let smoothed = out.smoothed.last().expect("one layer");
    let last = &smoothed.data()[smoothed.len() - d * d..];
    println!("max_row_deviation,{:.2e}", dgso::max_row_deviation(&kgcm::Tensor::new(&[d, d], last.to_vec())?));
    println!("smoothed_row0,{:?}", &last[..d]);

    let frozen = model.structure.as_ref().expect("frozen");
    let bias = ssa::structural_bias(frozen.matrix())?;
    println!("bias_max,{:.4}", bias.tensor().data().iter().cloned().fold(0.0, f64::max));
    Ok(())
}
