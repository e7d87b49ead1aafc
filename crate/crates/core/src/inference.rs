//! Caption generation: penalized beam search and greedy decoding.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, BOS, EOS, PAD, UNK};
use crate::decoder::DecoderState;
use crate::error::{Error, Result};
use crate::layers::Session;
use crate::model::{Encoded, ExampleInput, Model};

/// Words a caption may not end on.
pub const DEFAULT_BANNED_ENDINGS: [&str; 9] = ["a", "an", "the", "at", "of", "in", "on", "with", "and"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Subtracted from the log-probability of tokens already in the caption.
    pub repeat_penalty: f64,
    pub banned_end_tokens: BTreeSet<usize>,
    /// Never generated.
    pub banned_tokens: BTreeSet<usize>,
    /// Maximum caption length, not counting EOS.
    pub max_length: usize,
    /// EOS is blocked until the caption has this many tokens.
    pub min_length: usize,
}

impl PenaltyConfig {
    /// Default penalties, with banned endings looked up in `vocab` (words
    /// missing from it are skipped).
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self::with_banned_endings(vocab, &DEFAULT_BANNED_ENDINGS)
    }

    pub fn with_banned_endings<S: AsRef<str>>(vocab: &Vocabulary, words: &[S]) -> Self {
        PenaltyConfig {
            repeat_penalty: 2.0,
            banned_end_tokens: words
                .iter()
                .filter(|w| vocab.contains(w.as_ref()))
                .map(|w| vocab.id(w.as_ref()))
                .collect(),
            banned_tokens: [UNK, PAD, BOS].into_iter().collect(),
            max_length: 20,
            min_length: 3,
        }
    }

    /// No penalties or bans at all; only the length cap remains.
    pub fn off(max_length: usize) -> Self {
        PenaltyConfig {
            repeat_penalty: 0.0,
            banned_end_tokens: BTreeSet::new(),
            banned_tokens: BTreeSet::new(),
            max_length,
            min_length: 0,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.repeat_penalty >= 0.0 && self.repeat_penalty.is_finite()) {
            return Err(Error::Parameter(format!(
                "repeat_penalty must be a nonnegative number, got {}",
                self.repeat_penalty
            )));
        }
        if self.max_length == 0 {
            return Err(Error::Parameter("max_length must be positive".into()));
        }
        if self.min_length > self.max_length {
            return Err(Error::Parameter(format!(
                "min_length {} exceeds max_length {}",
                self.min_length, self.max_length
            )));
        }
        if let Some(&t) = self.banned_tokens.iter().chain(&self.banned_end_tokens).find(|&&t| t >= vocab_size) {
            return Err(Error::Parameter(format!("banned token {t} outside vocabulary of {vocab_size}")));
        }
        if self.banned_tokens.contains(&EOS) {
            return Err(Error::Parameter("EOS cannot be banned".into()));
        }
        Ok(())
    }
}

/// Adjusts one step's log-probabilities for a caption `tokens` so far.
/// `at_final_step` means the token chosen now will be the caption's last.
pub fn apply_penalties(logprobs: &[f64], tokens: &[usize], cfg: &PenaltyConfig, at_final_step: bool) -> Vec<f64> {
    let mut out = logprobs.to_vec();
    if cfg.repeat_penalty > 0.0 {
        let used: BTreeSet<usize> = tokens.iter().copied().collect();
        for t in used {
            if t < out.len() {
                out[t] -= cfg.repeat_penalty;
            }
        }
    }
    for &t in &cfg.banned_tokens {
        if t < out.len() {
            out[t] = f64::NEG_INFINITY;
        }
    }
    let ends_badly = tokens.last().is_some_and(|t| cfg.banned_end_tokens.contains(t));
    if tokens.len() < cfg.min_length || ends_badly {
        out[EOS] = f64::NEG_INFINITY;
    }
    if at_final_step {
        for &t in &cfg.banned_end_tokens {
            if t < out.len() {
                out[t] = f64::NEG_INFINITY;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Caption tokens without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Sum of the adjusted log-probabilities of every chosen token,
    /// including EOS when the caption is complete.
    pub score: f64,
    /// False when the caption was cut at `max_length` without choosing EOS.
    pub complete: bool,
}

struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    state: DecoderState,
}

fn step_logprobs(
    model: &Model,
    s: &mut Session,
    enc: &Encoded,
    hyp: &Hypothesis,
    cfg: &PenaltyConfig,
) -> Result<(Vec<f64>, DecoderState)> {
    let prev = hyp.tokens.last().copied().unwrap_or(BOS);
    let out = model.decode_step(s, enc, prev, &hyp.state)?;
    let at_final = hyp.tokens.len() + 1 == cfg.max_length;
    let adjusted = apply_penalties(s.tape.value(out.logprobs), &hyp.tokens, cfg, at_final);
    Ok((adjusted, out.state))
}

/// Length-synchronous beam search. Finished hypotheses leave the beam and
/// compete on total score; ties go to the lower token id, then the earlier
/// hypothesis.
pub fn beam_search(model: &Model, input: ExampleInput<'_>, beam_size: usize, cfg: &PenaltyConfig) -> Result<BeamResult> {
    if beam_size == 0 {
        return Err(Error::Parameter("beam size must be at least 1".into()));
    }
    cfg.validate(model.vocab_size())?;
    let mut s = model.session(false, 0);
    let enc = model.encode(&mut s, input)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state(&mut s),
    }];
    let mut finished: Vec<BeamResult> = Vec::new();

    while !live.is_empty() && finished.len() < beam_size {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let (lp, state) = step_logprobs(model, &mut s, &enc, hyp, cfg)?;
            states.push(state);
            for (tok, &x) in lp.iter().enumerate() {
                if x > f64::NEG_INFINITY {
                    candidates.push((hyp.score + x, tok, h));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam_size - finished.len());

        let mut next = Vec::new();
        for (score, tok, h) in candidates {
            let parent = &live[h];
            if tok == EOS {
                finished.push(BeamResult {
                    tokens: parent.tokens.clone(),
                    score,
                    complete: true,
                });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if tokens.len() == cfg.max_length {
                finished.push(BeamResult {
                    tokens,
                    score,
                    complete: false,
                });
            } else {
                next.push(Hypothesis {
                    tokens,
                    score,
                    state: states[h],
                });
            }
        }
        live = next;

        // scores only decrease, so live hypotheses cannot overtake a better finished one
        if let (Some(best_done), Some(best_live)) = (
            finished.iter().map(|f| f.score).max_by(f64::total_cmp),
            live.iter().map(|h| h.score).max_by(f64::total_cmp),
        ) {
            if best_live < best_done {
                break;
            }
        }
    }

    let mut best: Option<BeamResult> = None;
    for f in finished {
        if best.as_ref().is_none_or(|b| f.score > b.score) {
            best = Some(f);
        }
    }
    let best = best.ok_or_else(|| Error::Numeric("every continuation is banned; no caption produced".into()))?;
    if !best.complete {
        log::warn!("no caption finished within {} tokens; returning a truncated one", cfg.max_length);
    }
    Ok(best)
}

/// Arg-max decoding over the adjusted log-probabilities (lowest id on ties).
pub fn greedy_decode(model: &Model, input: ExampleInput<'_>, cfg: &PenaltyConfig) -> Result<BeamResult> {
    cfg.validate(model.vocab_size())?;
    let mut s = model.session(false, 0);
    let enc = model.encode(&mut s, input)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state(&mut s),
    };
    loop {
        let (lp, state) = step_logprobs(model, &mut s, &enc, &hyp, cfg)?;
        let mut arg = None;
        for (tok, &x) in lp.iter().enumerate() {
            if x > f64::NEG_INFINITY && arg.is_none_or(|(_, b)| x > b) {
                arg = Some((tok, x));
            }
        }
        let (tok, x) = arg.ok_or_else(|| Error::Numeric("every continuation is banned; no caption produced".into()))?;
        hyp.score += x;
        if tok == EOS {
            return Ok(BeamResult {
                tokens: hyp.tokens,
                score: hyp.score,
                complete: true,
            });
        }
        hyp.tokens.push(tok);
        hyp.state = state;
        if hyp.tokens.len() == cfg.max_length {
            return Ok(BeamResult {
                tokens: hyp.tokens,
                score: hyp.score,
                complete: false,
            });
        }
    }
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub image_id: String,
    pub style: String,
    pub caption: String,
    pub score: f64,
}

/// Decodes every input in parallel; output order follows input order.
pub fn decode_all(
    model: &Model,
    inputs: &[ExampleInput<'_>],
    beam_size: usize,
    cfg: &PenaltyConfig,
) -> Result<Vec<BeamResult>> {
    inputs
        .par_iter()
        .map(|input| {
            if beam_size == 1 {
                greedy_decode(model, *input, cfg)
            } else {
                beam_search(model, *input, beam_size, cfg)
            }
        })
        .collect()
}
