//! Style and word embeddings, and the stylized word vector fed to the decoder.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Linear, Session};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Style id → embedding row → linear layer → style vector `p`.
#[derive(Clone, Debug)]
pub struct StyleEmbedder {
    pub table: ParamId,
    pub linear: Linear,
    pub num_styles: usize,
}

impl StyleEmbedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        num_styles: usize,
        embed_dim: usize,
        style_dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let table = store.add_uniform("style.embed", ParamGroup::Style, &[num_styles, embed_dim], init_scale, rng);
        let linear = Linear::new(store, "style.linear", ParamGroup::Style, embed_dim, style_dim, init_scale, rng);
        StyleEmbedder {
            table,
            linear,
            num_styles,
        }
    }

    pub fn style_dim(&self) -> usize {
        self.linear.output_dim
    }

    pub fn embed(&self, s: &mut Session, style: usize) -> Result<Var> {
        if style >= self.num_styles {
            return Err(Error::Parameter(format!(
                "style id {} out of range for {} styles",
                style, self.num_styles
            )));
        }
        let table = s.param(self.table);
        let row = s.tape.row(table, style)?;
        self.linear.forward(s, row)
    }
}

/// The word embedding matrix, shared by target and dense-caption tokens.
#[derive(Clone, Debug)]
pub struct WordEmbedder {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl WordEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab_size: usize, dim: usize, init_scale: f64, rng: &mut R) -> Self {
        let table = store.add_uniform("word.embed", ParamGroup::WordEmbedding, &[vocab_size, dim], init_scale, rng);
        WordEmbedder { table, vocab_size, dim }
    }

    pub fn embed(&self, s: &mut Session, token: usize) -> Result<Var> {
        if token >= self.vocab_size {
            return Err(Error::Parameter(format!(
                "token id {} out of range for vocabulary of {}",
                token, self.vocab_size
            )));
        }
        let table = s.param(self.table);
        s.tape.row(table, token)
    }
}

/// `[word_vec; p]`, or `word_vec` unchanged when there is no style vector.
pub fn stylize(s: &mut Session, word_vec: Var, style_vec: Option<Var>) -> Result<Var> {
    match style_vec {
        Some(p) => s.tape.concat(&[word_vec, p], 0),
        None => Ok(word_vec),
    }
}
