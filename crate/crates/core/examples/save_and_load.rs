//! Model file round trip and the relation-matrix export.

use kgcm::config::ComponentSet;
use kgcm::data::{generate_synthetic, GeneratorConfig};
use kgcm::serialize::{load_model, model_to_bytes, save_model, structure_csv};
use kgcm::{fit, TrainConfig};

fn main() -> kgcm::Result<()> {
    let ds = generate_synthetic(&GeneratorConfig { regions: 2, days: 4, slots_per_day: 12, ..Default::default() })?;
    let cfg = TrainConfig {
        d: 8,
        n: 3,
        layers: 1,
        window: 8,
        horizon: 2,
        blocks: 1,
        epochs_stage1: 2,
        epochs_stage2: 2,
        components: ComponentSet::all(),
        ..TrainConfig::default()
    };
    let model = fit(&ds, &cfg)?;
    let path = std::env::temp_dir().join(format!("kgcm-{}.bin", std::process::id()));
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    println!("bytes,{}", model_to_bytes(&model)?.len());
    println!("identical,{}", back == model);
    print!("{}", structure_csv(back.structure.as_ref().expect("stage 1 ran").matrix()));
    std::fs::remove_file(&path).ok();
    Ok(())
}
