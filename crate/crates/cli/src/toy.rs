use threem::toy::{generate_toy, toy_model_config, toy_train_config, write_toy, ToyConfig};
use threem::Result;

use crate::args::MakeToyArgs;
use crate::config::{ModelSettings, RunConfig};
use crate::Outcome;

pub const TOY_CONFIG_FILE: &str = "toy_config.json";

pub fn run(a: MakeToyArgs) -> Result<Outcome> {
    let corpus = generate_toy(&ToyConfig {
        images: a.images,
        styles: a.styles,
        feature_dim: a.feature_dim,
        regions: a.regions,
        seed: a.seed,
    })?;
    let data = write_toy(&a.out, &corpus)?;
    let model = toy_model_config(1, 1, a.feature_dim);
    let cfg = RunConfig {
        model: ModelSettings {
            dims: model.dims,
            dropout: model.dropout,
            word_state_source: model.word_state_source,
            init_scale: model.init_scale,
        },
        train: toy_train_config(0),
        ..RunConfig::defaults("train")
    };
    let path = a.out.join(TOY_CONFIG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n")
        .map_err(|e| threem::Error::Data(format!("cannot write {}: {e}", path.display())))?;
    println!("{}", data.display());
    log::info!(
        "wrote {} records for {} images x {} styles, and {}",
        corpus.records.len(),
        a.images,
        a.styles,
        path.display()
    );
    Ok(Outcome::Success)
}
