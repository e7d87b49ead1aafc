//! Dataset ingestion, vocabularies and batching.

mod batch;
mod dataset;
mod features;
mod vocab;

pub use batch::{batch_iter, Batch};
pub use dataset::{
    build_styles_from_records, build_vocab_from_records, encode_dense_captions, encode_target,
    feature_dims, load_dataset, load_dataset_with, read_raw_records, ExampleRecord, RawRecord,
    EMPTY_CAPTION, NUM_DENSE_CAPTIONS,
};
pub use features::{manifest_path, write_feature_file, FeatureFile, ImageFeatures, FEATURE_MAGIC, FEATURE_VERSION};
pub use vocab::{is_special, tokenize, StyleVocabulary, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};
