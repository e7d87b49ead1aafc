//! The fused two-branch top-down attention decoder.
//!
//! Each branch is a top-down attention block: an attention LSTM turns the
//! previous fused states, a context vector and the stylized word into a
//! query, the query soft-attends over the branch's value vectors, and a
//! language LSTM consumes the attended vector. The caption branch attends
//! over dense-caption word states with the caption vector as context; the
//! visual branch attends over spatial features with the mean-pooled feature
//! as context. Per step the branches' hidden states are summed, and the
//! (dropped-out) language states are projected to vocabulary log-probabilities.

use rand::Rng;

use crate::autodiff::Var;
use crate::encoders::LstmCell;
use crate::error::{contract_err, dim_err, Result};
use crate::layers::{Linear, Session};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Additive attention `a_i = w_aᵀ tanh(W_va v_i + W_ha h)`.
#[derive(Clone, Debug)]
pub struct Attention {
    /// `W_va: [H, value_dim]`
    pub value_proj: ParamId,
    /// `W_ha: [H, query_dim]`
    pub query_proj: ParamId,
    /// `w_a: [H]`
    pub score: ParamId,
    pub value_dim: usize,
    pub query_dim: usize,
    pub attn_dim: usize,
}

/// Values prepared once per example: transposed for the weighted sum and
/// projected by `W_va` for scoring.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    values_t: Var,
    keys: Var,
    count: usize,
}

impl AttentionMemory {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Stacks equally sized vectors into a `[K, D]` matrix.
pub fn stack_rows(s: &mut Session, rows: &[Var]) -> Result<Var> {
    let Some(&first) = rows.first() else {
        return Err(contract_err!("cannot attend over zero values"));
    };
    let d = s.tape.shape(first).to_vec();
    if d.len() != 1 {
        return Err(dim_err!("attention values must be vectors, got {:?}", d));
    }
    let flat = s.tape.concat(rows, 0)?;
    s.tape.reshape(flat, &[rows.len(), d[0]])
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        value_dim: usize,
        query_dim: usize,
        attn_dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        Attention {
            value_proj: store.add_uniform(format!("{name}.w_va"), group, &[attn_dim, value_dim], init_scale, rng),
            query_proj: store.add_uniform(format!("{name}.w_ha"), group, &[attn_dim, query_dim], init_scale, rng),
            score: store.add_uniform(format!("{name}.w_a"), group, &[attn_dim], init_scale, rng),
            value_dim,
            query_dim,
            attn_dim,
        }
    }

    /// `values: [K, value_dim]` with `K ≥ 1`.
    pub fn prepare(&self, s: &mut Session, values: Var) -> Result<AttentionMemory> {
        let shape = s.tape.shape(values).to_vec();
        if shape.len() != 2 || shape[1] != self.value_dim {
            return Err(dim_err!(
                "attention expects values [K, {}], got {:?}",
                self.value_dim,
                shape
            ));
        }
        let w_va = s.param(self.value_proj);
        let w_va_t = s.tape.transpose(w_va)?;
        let keys = s.tape.matmul(values, w_va_t)?;
        let values_t = s.tape.transpose(values)?;
        Ok(AttentionMemory {
            values_t,
            keys,
            count: shape[0],
        })
    }

    /// Returns the attended vector `Σ α_i v_i` and the weights `α`.
    pub fn attend(&self, s: &mut Session, memory: &AttentionMemory, query: Var) -> Result<(Var, Var)> {
        if s.tape.shape(query) != [self.query_dim] {
            return Err(dim_err!(
                "attention query must be [{}], got {:?}",
                self.query_dim,
                s.tape.shape(query)
            ));
        }
        let w_ha = s.param(self.query_proj);
        let w_a = s.param(self.score);
        let q = s.tape.matmul(w_ha, query)?;
        let pre = s.tape.add_row(memory.keys, q)?;
        let act = s.tape.tanh(pre);
        let scores = s.tape.matmul(act, w_a)?;
        let alpha = s.tape.softmax(scores)?;
        let attended = s.tape.matmul(memory.values_t, alpha)?;
        Ok((attended, alpha))
    }

    /// Convenience form over a list of value vectors.
    pub fn attend_values(&self, s: &mut Session, query: Var, values: &[Var]) -> Result<(Var, Var)> {
        let stacked = stack_rows(s, values)?;
        let memory = self.prepare(s, stacked)?;
        self.attend(s, &memory, query)
    }
}

/// One top-down attention branch with its own parameters.
#[derive(Clone, Debug)]
pub struct Branch {
    pub att_lstm: LstmCell,
    pub lang_lstm: LstmCell,
    pub attention: Attention,
    pub context_dim: usize,
    pub word_dim: usize,
}

/// LSTM cell states private to one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchCells {
    pub att: Var,
    pub lang: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub h_att: Var,
    pub h_lang: Var,
    pub alpha: Var,
    pub cells: BranchCells,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        context_dim: usize,
        value_dim: usize,
        word_dim: usize,
        hidden: usize,
        attn_dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let att_lstm = LstmCell::new(
            store,
            &format!("{name}.att_lstm"),
            group,
            hidden + context_dim + word_dim,
            hidden,
            init_scale,
            rng,
        );
        let attention = Attention::new(store, &format!("{name}.attention"), group, value_dim, hidden, attn_dim, init_scale, rng);
        let lang_lstm = LstmCell::new(
            store,
            &format!("{name}.lang_lstm"),
            group,
            value_dim + hidden,
            hidden,
            init_scale,
            rng,
        );
        Branch {
            att_lstm,
            lang_lstm,
            attention,
            context_dim,
            word_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.att_lstm.hidden_dim
    }

    pub fn zero_cells(&self, s: &mut Session) -> BranchCells {
        let n = self.hidden_dim();
        BranchCells {
            att: s.zeros(n),
            lang: s.zeros(n),
        }
    }

    /// Both LSTMs start from the fused previous hidden states; only the cell
    /// states are branch-private.
    pub fn step(
        &self,
        s: &mut Session,
        context: Var,
        memory: &AttentionMemory,
        word: Var,
        prev: &DecoderState,
        cells: BranchCells,
    ) -> Result<BranchOutput> {
        let input = s.tape.concat(&[prev.h_lang, context, word], 0)?;
        let att = self.att_lstm.step(
            s,
            input,
            crate::encoders::LstmState {
                h: prev.h_att,
                c: cells.att,
            },
        )?;
        let (attended, alpha) = self.attention.attend(s, memory, att.h)?;
        let lang_in = s.tape.concat(&[attended, att.h], 0)?;
        let lang = self.lang_lstm.step(
            s,
            lang_in,
            crate::encoders::LstmState {
                h: prev.h_lang,
                c: cells.lang,
            },
        )?;
        Ok(BranchOutput {
            h_att: att.h,
            h_lang: lang.h,
            alpha,
            cells: BranchCells {
                att: att.c,
                lang: lang.c,
            },
        })
    }
}

/// Fused hidden states plus each active branch's private cell states.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h_lang: Var,
    pub h_att: Var,
    pub caption: Option<BranchCells>,
    pub visual: Option<BranchCells>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[V]` log-probabilities of the next token.
    pub logprobs: Var,
    pub state: DecoderState,
    /// Input to the output projection.
    pub h_output: Var,
    pub caption_alpha: Option<Var>,
    pub visual_alpha: Option<Var>,
    /// Per-branch states before fusion.
    pub caption: Option<BranchOutput>,
    pub visual: Option<BranchOutput>,
}

fn fuse(s: &mut Session, a: Option<Var>, b: Option<Var>) -> Result<Var> {
    match (a, b) {
        (Some(a), Some(b)) => s.tape.add(a, b),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(contract_err!("at least one decoder branch must be active")),
    }
}

/// Sums branch states, drops out each language state independently, and
/// projects to log-probabilities. A missing branch contributes zero.
pub fn fuse_and_project(
    s: &mut Session,
    caption: Option<&BranchOutput>,
    visual: Option<&BranchOutput>,
    projection: &Linear,
    dropout: f64,
) -> Result<StepOutput> {
    let h_lang = fuse(s, caption.map(|o| o.h_lang), visual.map(|o| o.h_lang))?;
    let h_att = fuse(s, caption.map(|o| o.h_att), visual.map(|o| o.h_att))?;
    let dropped_cap = caption.map(|o| s.dropout(o.h_lang, dropout)).transpose()?;
    let dropped_vis = visual.map(|o| s.dropout(o.h_lang, dropout)).transpose()?;
    let h_output = fuse(s, dropped_cap, dropped_vis)?;
    let logits = projection.forward(s, h_output)?;
    let logprobs = s.tape.log_softmax(logits)?;
    Ok(StepOutput {
        logprobs,
        state: DecoderState {
            h_lang,
            h_att,
            caption: caption.map(|o| o.cells),
            visual: visual.map(|o| o.cells),
        },
        h_output,
        caption_alpha: caption.map(|o| o.alpha),
        visual_alpha: visual.map(|o| o.alpha),
        caption: caption.copied(),
        visual: visual.copied(),
    })
}
