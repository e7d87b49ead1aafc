use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Result};

/// Mean token cross-entropy: `-Σ mask·logprob(target) / Σ mask`.
///
/// `logprobs` is `[B, T, V]`; `targets` and `mask` are `[B, T]`.
pub fn sequence_loss(tape: &mut Tape, logprobs: Var, targets: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<Var> {
    let count: f64 = mask.iter().flatten().sum();
    if count == 0.0 {
        return Err(contract_err!("sequence loss over an all-zero mask"));
    }
    if mask.iter().flatten().any(|&m| m != 0.0 && m != 1.0) {
        return Err(contract_err!("mask entries must be 0 or 1"));
    }
    let total = tape.masked_nll_sum(logprobs, targets, mask)?;
    Ok(tape.scale(total, 1.0 / count))
}
