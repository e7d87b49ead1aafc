//! Line-delimited JSON datasets.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{FeatureFile, ImageFeatures};
use super::vocab::{tokenize, StyleVocabulary, Vocabulary, BOS, EOS};
use crate::error::{data_err, Error, Result};

pub const NUM_DENSE_CAPTIONS: usize = 5;

/// Token sequence standing in for a missing dense caption.
pub const EMPTY_CAPTION: [usize; 1] = [EOS];

/// One dataset line as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub image_id: String,
    pub style: String,
    pub caption: String,
    pub dense_captions: Vec<String>,
    pub features_ref: String,
}

/// A fully resolved training example.
#[derive(Clone, Debug)]
pub struct ExampleRecord {
    pub image_id: String,
    pub features: Arc<ImageFeatures>,
    /// Always exactly [`NUM_DENSE_CAPTIONS`] non-empty sequences.
    pub dense_captions: Vec<Vec<usize>>,
    pub style: usize,
    /// `BOS ... EOS`
    pub target: Vec<usize>,
}

pub fn read_raw_records(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => data_err!("dataset {} not found", path.display()),
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line)
            .map_err(|e| data_err!("{}:{}: malformed record: {}", path.display(), i + 1, e))?;
        if rec.dense_captions.len() > NUM_DENSE_CAPTIONS {
            return Err(data_err!(
                "{}:{}: {} dense captions, at most {} allowed",
                path.display(),
                i + 1,
                rec.dense_captions.len(),
                NUM_DENSE_CAPTIONS
            ));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(data_err!("dataset {} has no records", path.display()));
    }
    Ok(out)
}

/// Vocabulary over target and dense captions of the given (training) records.
pub fn build_vocab_from_records(records: &[RawRecord], min_frequency: usize) -> Result<Vocabulary> {
    let captions = records.iter().flat_map(|r| {
        std::iter::once(tokenize(&r.caption)).chain(r.dense_captions.iter().map(|d| tokenize(d)))
    });
    Vocabulary::build(captions, min_frequency)
}

pub fn build_styles_from_records(records: &[RawRecord]) -> Result<StyleVocabulary> {
    StyleVocabulary::collect(records.iter().map(|r| r.style.clone()))
}

/// Pads to exactly five dense captions; empty captions become the sentinel.
pub fn encode_dense_captions(vocab: &Vocabulary, captions: &[String]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = captions
        .iter()
        .take(NUM_DENSE_CAPTIONS)
        .map(|c| {
            let ids = vocab.encode(&tokenize(c));
            if ids.is_empty() {
                EMPTY_CAPTION.to_vec()
            } else {
                ids
            }
        })
        .collect();
    out.resize(NUM_DENSE_CAPTIONS, EMPTY_CAPTION.to_vec());
    out
}

pub fn encode_target(vocab: &Vocabulary, caption: &str) -> Vec<usize> {
    let mut t = vec![BOS];
    t.extend(vocab.encode(&tokenize(caption)));
    t.push(EOS);
    t
}

/// Loads `path`, resolving feature references relative to its directory.
pub fn load_dataset(path: &Path, vocab: &Vocabulary, styles: &StyleVocabulary) -> Result<Vec<ExampleRecord>> {
    load_dataset_with(path, vocab, styles, None)
}

/// As [`load_dataset`], optionally reading every record's features from
/// `features_override` instead of its `features_ref`.
pub fn load_dataset_with(
    path: &Path,
    vocab: &Vocabulary,
    styles: &StyleVocabulary,
    features_override: Option<&Path>,
) -> Result<Vec<ExampleRecord>> {
    let raw = read_raw_records(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut files: HashMap<PathBuf, FeatureFile> = HashMap::new();
    let mut cache: HashMap<(PathBuf, String), Arc<ImageFeatures>> = HashMap::new();
    let mut dims: Option<(usize, usize, PathBuf)> = None;
    let mut out = Vec::with_capacity(raw.len());
    for (line, rec) in raw.into_iter().enumerate() {
        let style = styles
            .id(&rec.style)
            .map_err(|e| data_err!("{}:{}: {}", path.display(), line + 1, e.to_string().trim_start_matches("data error: ")))?;
        let fpath = match features_override {
            Some(p) => p.to_owned(),
            None => base.join(&rec.features_ref),
        };
        if !files.contains_key(&fpath) {
            let file = FeatureFile::open(&fpath)?;
            match &dims {
                Some((d, r, first)) if (*d, *r) != (file.dim(), file.regions()) => {
                    return Err(data_err!(
                        "feature files disagree on dimensions: {} has {}x{}, {} has {}x{}",
                        first.display(),
                        r,
                        d,
                        fpath.display(),
                        file.regions(),
                        file.dim()
                    ));
                }
                Some(_) => {}
                None => dims = Some((file.dim(), file.regions(), fpath.clone())),
            }
            files.insert(fpath.clone(), file);
        }
        let key = (fpath.clone(), rec.image_id.clone());
        let features = match cache.get(&key) {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(files[&fpath].get(&rec.image_id)?);
                cache.insert(key, f.clone());
                f
            }
        };
        let target = encode_target(vocab, &rec.caption);
        if target.len() == 2 {
            return Err(data_err!("{}:{}: caption has no tokens", path.display(), line + 1));
        }
        out.push(ExampleRecord {
            image_id: rec.image_id,
            features,
            dense_captions: encode_dense_captions(vocab, &rec.dense_captions),
            style,
            target,
        });
    }
    Ok(out)
}

/// Feature dimension and spatial count shared by all records.
pub fn feature_dims(records: &[ExampleRecord]) -> Option<(usize, usize)> {
    records.first().map(|r| (r.features.dim(), r.features.regions()))
}
