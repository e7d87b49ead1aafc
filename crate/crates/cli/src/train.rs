use std::path::{Path, PathBuf};

use threem::corpus::{
    build_styles_from_records, build_vocab_from_records, feature_dims, load_dataset_with, read_raw_records,
    ExampleRecord, StyleVocabulary, Vocabulary,
};
use threem::trainer::{fit, save_checkpoint, write_log_csv, TrainReport};
use threem::{Error, Model, Result};

use crate::args::TrainArgs;
use crate::config::{create_dir, RunConfig};
use crate::Outcome;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Parameter(format!("{flag} is required")))
}

pub struct Corpus {
    pub vocab: Vocabulary,
    pub styles: StyleVocabulary,
    pub train: Vec<ExampleRecord>,
    pub val: Vec<ExampleRecord>,
}

/// Builds vocabularies from the training file and loads both splits.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let data = require(&cfg.data, "--data")?;
    let raw = read_raw_records(data)?;
    let vocab = build_vocab_from_records(&raw, cfg.min_frequency)?;
    let styles = build_styles_from_records(&raw)?;
    let features = cfg.features.as_deref();
    let train = load_dataset_with(data, &vocab, &styles, features)?;
    let val = match &cfg.val {
        Some(p) => load_dataset_with(p, &vocab, &styles, features)?,
        None => Vec::new(),
    };
    Ok(Corpus {
        vocab,
        styles,
        train,
        val,
    })
}

/// Trains from scratch and returns the model holding its best parameters.
pub fn train_model(cfg: &RunConfig, corpus: &Corpus) -> Result<(Model, TrainReport)> {
    let (feature_dim, _) = feature_dims(&corpus.train).expect("loaded datasets are non-empty");
    let model_cfg = cfg.model_config(corpus.vocab.len(), corpus.styles.len(), feature_dim);
    let mut model = Model::new(model_cfg, cfg.train.seed)?;
    log::info!(
        "training {} model: {} parameters, {} examples, vocabulary {}",
        cfg.ablation.label(),
        model.params.num_scalars(),
        corpus.train.len(),
        corpus.vocab.len()
    );
    let report = fit(&mut model, &corpus.train, &corpus.val, &cfg.train)?;
    model.params = report.best_params.clone();
    Ok((model, report))
}

/// Writes checkpoint and log into `dir`.
pub fn save_run(dir: &Path, model: &Model, corpus: &Corpus, report: &TrainReport) -> Result<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), model, &corpus.vocab, &corpus.styles)?;
    write_log_csv(&dir.join(LOG_FILE), &report.log)
}

pub fn run(a: TrainArgs) -> Result<Outcome> {
    let mut cfg = a.config.resolve("train")?;
    a.data.apply(&mut cfg);
    a.train.apply(&mut cfg);
    a.ablation.apply(&mut cfg);
    cfg.validate()?;
    let out = require(&cfg.out, "--out")?.to_owned();
    let corpus = load_corpus(&cfg)?;
    create_dir(&out)?;
    cfg.echo(&out)?;
    let (model, report) = train_model(&cfg, &corpus)?;
    save_run(&out, &model, &corpus, &report)?;
    log::info!(
        "best validation loss {:.6} at iteration {} after {} epochs; wrote {}",
        report.best_val_loss,
        report.best_iteration,
        report.epochs_run,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(Outcome::Success)
}
