//! Synthetic multi-style corpus for smoke tests and overfitting runs.
//!
//! Every image gets a subject, an action and a place; every style fixes an
//! opening adjective, an adverb, a preposition and a place adjective. The
//! caption for `(image, style)` is
//! `a <adjective> <subject> <action> <adverb> <preposition> the <place adjective> <place>`,
//! so captions are distinct per pair, never repeat a word and always end on
//! a noun.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_feature_file, ImageFeatures, RawRecord};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelDims};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

const SUBJECTS: [&str; 8] = ["dog", "cat", "bird", "horse", "boat", "car", "tree", "child"];
const ACTIONS: [&str; 8] = ["runs", "sits", "flies", "stands", "floats", "waits", "grows", "plays"];
const PLACES: [&str; 8] = ["park", "house", "sky", "field", "lake", "road", "hill", "yard"];
const COLOURS: [&str; 8] = ["brown", "black", "blue", "white", "red", "silver", "green", "small"];

struct StyleWords {
    name: &'static str,
    adjective: &'static str,
    adverb: &'static str,
    preposition: &'static str,
    place_adjective: &'static str,
}

const STYLES: [StyleWords; 3] = [
    StyleWords {
        name: "happy",
        adjective: "cheerful",
        adverb: "happily",
        preposition: "in",
        place_adjective: "sunny",
    },
    StyleWords {
        name: "gloomy",
        adjective: "lonely",
        adverb: "slowly",
        preposition: "under",
        place_adjective: "dark",
    },
    StyleWords {
        name: "calm",
        adjective: "quiet",
        adverb: "gently",
        preposition: "near",
        place_adjective: "still",
    },
];

pub const MAX_TOY_IMAGES: usize = SUBJECTS.len();
pub const MAX_TOY_STYLES: usize = STYLES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub images: usize,
    pub styles: usize,
    pub feature_dim: usize,
    pub regions: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            images: 8,
            styles: 2,
            feature_dim: 16,
            regions: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub records: Vec<RawRecord>,
    pub features: Vec<(String, ImageFeatures)>,
    pub feature_dim: usize,
    pub regions: usize,
}

pub const TOY_FEATURES_FILE: &str = "features.bin";
pub const TOY_DATA_FILE: &str = "toy.jsonl";

pub fn style_names(count: usize) -> Vec<&'static str> {
    STYLES.iter().take(count).map(|s| s.name).collect()
}

/// The caption of image `image` in style `style`.
pub fn toy_caption(image: usize, style: usize) -> String {
    let s = &STYLES[style];
    format!(
        "a {} {} {} {} {} the {} {}",
        s.adjective, SUBJECTS[image], ACTIONS[image], s.adverb, s.preposition, s.place_adjective, PLACES[image]
    )
}

fn dense_captions(image: usize) -> Vec<String> {
    let all = [
        format!("{} {}", COLOURS[image], SUBJECTS[image]),
        format!("{} on {}", SUBJECTS[image], PLACES[image]),
        format!("{} {}", SUBJECTS[image], ACTIONS[image]),
        format!("open {}", PLACES[image]),
        format!("{} background", COLOURS[(image + 3) % COLOURS.len()]),
    ];
    // vary the count so missing-caption padding is exercised
    let keep = 3 + image % 3;
    all.into_iter().take(keep).collect()
}

pub fn generate_toy(cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.images == 0 || cfg.images > MAX_TOY_IMAGES {
        return Err(Error::Parameter(format!(
            "toy corpus supports 1..={MAX_TOY_IMAGES} images, got {}",
            cfg.images
        )));
    }
    if cfg.styles == 0 || cfg.styles > MAX_TOY_STYLES {
        return Err(Error::Parameter(format!(
            "toy corpus supports 1..={MAX_TOY_STYLES} styles, got {}",
            cfg.styles
        )));
    }
    if cfg.feature_dim == 0 || cfg.regions == 0 {
        return Err(Error::Parameter("feature_dim and regions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut features = Vec::with_capacity(cfg.images);
    let mut records = Vec::with_capacity(cfg.images * cfg.styles);
    for image in 0..cfg.images {
        let id = format!("img{image}");
        let spatial: Vec<f64> = (0..cfg.regions * cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean: Vec<f64> = (0..cfg.feature_dim)
            .map(|d| (0..cfg.regions).map(|r| spatial[r * cfg.feature_dim + d]).sum::<f64>() / cfg.regions as f64)
            .collect();
        features.push((
            id.clone(),
            ImageFeatures {
                mean_pooled: Tensor::vector(mean),
                spatial: Tensor::matrix(cfg.regions, cfg.feature_dim, spatial)?,
            },
        ));
        for style in 0..cfg.styles {
            records.push(RawRecord {
                image_id: id.clone(),
                style: STYLES[style].name.to_owned(),
                caption: toy_caption(image, style),
                dense_captions: dense_captions(image),
                features_ref: TOY_FEATURES_FILE.to_owned(),
            });
        }
    }
    Ok(ToyCorpus {
        records,
        features,
        feature_dim: cfg.feature_dim,
        regions: cfg.regions,
    })
}

/// Model sized for memorizing the toy corpus quickly.
pub fn toy_model_config(vocab_size: usize, num_styles: usize, feature_dim: usize) -> ModelConfig {
    ModelConfig {
        dims: ModelDims {
            word_dim: 32,
            style_embed_dim: 16,
            style_dim: 16,
            encoder_hidden: 32,
            visual_hidden: 32,
            decoder_hidden: 32,
            attention_dim: 32,
        },
        dropout: 0.0,
        // wider initial weights roughly halve the epochs needed to memorize
        init_scale: 0.3,
        ..ModelConfig::new(vocab_size, num_styles, feature_dim)
    }
}

/// Overfitting schedule: constant learning rate 5e-4, one example per step,
/// at most 500 epochs, stopping once the loss is below 0.05.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        initial_lr: 5e-4,
        decay_factor: 1.0,
        epochs: 500,
        batch_size: 1,
        eval_interval: 1_000_000,
        seed,
        stop_below: Some(0.05),
        ..TrainConfig::default()
    }
}

/// Writes `toy.jsonl`, `features.bin` and its manifest into `dir`; returns
/// the dataset path.
pub fn write_toy(dir: &Path, corpus: &ToyCorpus) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_feature_file(
        &dir.join(TOY_FEATURES_FILE),
        corpus.feature_dim,
        corpus.regions,
        corpus.features.iter().map(|(id, f)| (id.as_str(), f)),
    )?;
    let mut lines = String::new();
    for r in &corpus.records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    let path = dir.join(TOY_DATA_FILE);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
