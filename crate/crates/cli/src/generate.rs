use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use threem::corpus::{encode_dense_captions, read_raw_records, FeatureFile, ImageFeatures, StyleVocabulary, Vocabulary};
use threem::inference::{decode_all, GeneratedCaption, PenaltyConfig};
use threem::trainer::load_checkpoint;
use threem::{Error, ExampleInput, Model, Result};

use crate::args::GenerateArgs;
use crate::config::create_dir;
use crate::train::require;
use crate::Outcome;

pub const CAPTIONS_FILE: &str = "captions.jsonl";

/// One image's conditioning inputs.
pub struct Image {
    pub id: String,
    pub features: ImageFeatures,
    pub dense_captions: Vec<Vec<usize>>,
    /// Styles of the records that mention this image, in file order.
    pub record_styles: Vec<String>,
}

/// Distinct images of a dataset file in first-appearance order.
pub fn load_images(data: &Path, features_override: Option<&Path>, vocab: &Vocabulary) -> Result<Vec<Image>> {
    let raw = read_raw_records(data)?;
    let base = data.parent().unwrap_or(Path::new("."));
    let mut files: HashMap<PathBuf, FeatureFile> = HashMap::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut images: Vec<Image> = Vec::new();
    for rec in raw {
        if let Some(&i) = index.get(&rec.image_id) {
            if !images[i].record_styles.contains(&rec.style) {
                images[i].record_styles.push(rec.style);
            }
            continue;
        }
        let path = match features_override {
            Some(p) => p.to_owned(),
            None => base.join(&rec.features_ref),
        };
        if !files.contains_key(&path) {
            files.insert(path.clone(), FeatureFile::open(&path)?);
        }
        let features = files[&path].get(&rec.image_id)?;
        index.insert(rec.image_id.clone(), images.len());
        images.push(Image {
            id: rec.image_id,
            features,
            dense_captions: encode_dense_captions(vocab, &rec.dense_captions),
            record_styles: vec![rec.style],
        });
    }
    Ok(images)
}

pub fn style_id(styles: &StyleVocabulary, name: &str) -> Result<usize> {
    styles.id(name).map_err(|_| {
        Error::Parameter(format!(
            "unknown style {name:?}; known styles: {}",
            styles.names().join(", ")
        ))
    })
}

/// Decodes each `(image index, style id)` request.
pub fn caption_requests(
    model: &Model,
    vocab: &Vocabulary,
    styles: &StyleVocabulary,
    images: &[Image],
    requests: &[(usize, usize)],
    beam: usize,
    penalties: &PenaltyConfig,
) -> Result<Vec<GeneratedCaption>> {
    let inputs: Vec<ExampleInput> = requests
        .iter()
        .map(|&(i, s)| ExampleInput {
            features: &images[i].features,
            dense_captions: &images[i].dense_captions,
            style: s,
        })
        .collect();
    let results = decode_all(model, &inputs, beam, penalties)?;
    Ok(requests
        .iter()
        .zip(results)
        .map(|(&(i, s), r)| GeneratedCaption {
            image_id: images[i].id.clone(),
            style: styles.name(s).expect("requested style exists").to_owned(),
            caption: vocab.detokenize(&r.tokens),
            score: r.score,
        })
        .collect())
}

pub fn write_captions(path: &Path, captions: &[GeneratedCaption]) -> Result<()> {
    let mut text = String::new();
    for c in captions {
        text.push_str(&serde_json::to_string(c).expect("caption serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn run(a: GenerateArgs) -> Result<Outcome> {
    let mut cfg = a.config.resolve("generate")?;
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    if a.features.is_some() {
        cfg.features = a.features.clone();
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    a.decode.apply(&mut cfg);
    if a.all_styles {
        cfg.decode.all_styles = true;
        cfg.decode.style = None;
    }
    if a.style.is_some() {
        cfg.decode.style = a.style.clone();
        cfg.decode.all_styles = false;
    }
    cfg.validate()?;
    let out = require(&cfg.out, "--out")?.to_owned();
    let (model, vocab, styles) = load_checkpoint(require(&cfg.checkpoint, "--checkpoint")?)?;
    // the model's own architecture, not the flags, decides what was trained
    cfg.ablation = model.config.ablation;
    let images = load_images(require(&cfg.data, "--data")?, cfg.features.as_deref(), &vocab)?;

    let mut requests = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if cfg.decode.all_styles {
            requests.extend((0..styles.len()).map(|s| (i, s)));
        } else if let Some(name) = &cfg.decode.style {
            requests.push((i, style_id(&styles, name)?));
        } else {
            for name in &img.record_styles {
                requests.push((i, style_id(&styles, name)?));
            }
        }
    }
    let penalties = cfg.penalties(&vocab);
    let captions = caption_requests(&model, &vocab, &styles, &images, &requests, cfg.decode.beam, &penalties)?;
    create_dir(&out)?;
    cfg.echo(&out)?;
    write_captions(&out.join(CAPTIONS_FILE), &captions)?;
    log::info!("wrote {} captions to {}", captions.len(), out.join(CAPTIONS_FILE).display());
    Ok(Outcome::Success)
}
