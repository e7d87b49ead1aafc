//! Encoders for the two image modalities: an LSTM over the dense captions
//! and a feed-forward layer over the visual feature vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corpus::NUM_DENSE_CAPTIONS;
use crate::error::{contract_err, data_err, dim_err, Result};
use crate::layers::{Linear, Session};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// LSTM cell. Gates come from one affine map of `[x; h]`, laid out as
/// input, forget, output, candidate blocks of `hidden_dim` rows each.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            &[4 * hidden_dim, input_dim + hidden_dim],
            init_scale,
            rng,
        );
        let mut b = vec![0.0; 4 * hidden_dim];
        b[hidden_dim..2 * hidden_dim].fill(1.0);
        let bias = store.add(format!("{name}.bias"), group, Tensor::vector(b));
        LstmCell {
            weight,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    pub fn zero_state(&self, s: &mut Session) -> LstmState {
        LstmState {
            h: s.zeros(self.hidden_dim),
            c: s.zeros(self.hidden_dim),
        }
    }

    /// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(&self, s: &mut Session, x: Var, state: LstmState) -> Result<LstmState> {
        let n = self.hidden_dim;
        if s.tape.shape(x) != [self.input_dim] || s.tape.shape(state.h) != [n] || s.tape.shape(state.c) != [n] {
            return Err(dim_err!(
                "lstm cell ({} -> {}) got x {:?}, h {:?}, c {:?}",
                self.input_dim,
                n,
                s.tape.shape(x),
                s.tape.shape(state.h),
                s.tape.shape(state.c)
            ));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let xh = s.tape.concat(&[x, state.h], 0)?;
        let z = s.tape.matmul(w, xh)?;
        let z = s.tape.add(z, b)?;
        let zi = s.tape.slice(z, 0, n)?;
        let zf = s.tape.slice(z, n, n)?;
        let zo = s.tape.slice(z, 2 * n, n)?;
        let zg = s.tape.slice(z, 3 * n, n)?;
        let i = s.tape.sigmoid(zi);
        let f = s.tape.sigmoid(zf);
        let o = s.tape.sigmoid(zo);
        let g = s.tape.tanh(zg);
        let fc = s.tape.mul(f, state.c)?;
        let ig = s.tape.mul(i, g)?;
        let c = s.tape.add(fc, ig)?;
        let tc = s.tape.tanh(c);
        let h = s.tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Which recurrent state of the caption encoder is exposed per word for attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordStateSource {
    #[default]
    Cell,
    Hidden,
}

#[derive(Clone, Debug)]
pub struct EncodedCaptions {
    /// Concatenated final hidden states, `[5 · H_e]`.
    pub v_cap: Var,
    /// One state per dense-caption token, caption 1 first.
    pub word_states: Vec<Var>,
    pub final_hidden: Vec<Var>,
}

impl EncodedCaptions {
    /// Total token count `L` over the five captions.
    pub fn len(&self) -> usize {
        self.word_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_states.is_empty()
    }
}

/// Runs one shared cell over each of the five embedded captions from a zero state.
pub fn encode_dense_captions(
    s: &mut Session,
    cell: &LstmCell,
    captions: &[Vec<Var>],
    source: WordStateSource,
) -> Result<EncodedCaptions> {
    if captions.len() != NUM_DENSE_CAPTIONS {
        return Err(contract_err!(
            "expected {} dense captions, got {}",
            NUM_DENSE_CAPTIONS,
            captions.len()
        ));
    }
    let mut word_states = Vec::new();
    let mut final_hidden = Vec::with_capacity(NUM_DENSE_CAPTIONS);
    for (i, cap) in captions.iter().enumerate() {
        if cap.is_empty() {
            return Err(contract_err!("dense caption {} is empty (expected the sentinel)", i + 1));
        }
        let mut state = cell.zero_state(s);
        for &w in cap {
            state = cell.step(s, w, state)?;
            word_states.push(match source {
                WordStateSource::Cell => state.c,
                WordStateSource::Hidden => state.h,
            });
        }
        final_hidden.push(state.h);
    }
    let v_cap = s.tape.concat(&final_hidden, 0)?;
    Ok(EncodedCaptions {
        v_cap,
        word_states,
        final_hidden,
    })
}

#[derive(Clone, Debug)]
pub struct EncodedVisual {
    /// `[H_v]`
    pub mean_pool: Var,
    /// `[R, H_v]`, one row per spatial region.
    pub spatial: Var,
}

/// Linear → dropout → ReLU, shared across the mean-pooled vector and every
/// spatial vector.
pub fn encode_visual(
    s: &mut Session,
    layer: &Linear,
    dropout: f64,
    mean_pooled: Var,
    spatial: Var,
) -> Result<EncodedVisual> {
    let d = layer.input_dim;
    let sm = s.tape.shape(mean_pooled).to_vec();
    let ss = s.tape.shape(spatial).to_vec();
    if sm != [d] || ss.len() != 2 || ss[1] != d {
        return Err(data_err!(
            "visual features have shapes {:?} and {:?}, encoder expects dimension {}",
            sm,
            ss,
            d
        ));
    }
    let m = layer.forward(s, mean_pooled)?;
    let m = s.dropout(m, dropout)?;
    let m = s.tape.relu(m);
    let sp = layer.forward_rows(s, spatial)?;
    let sp = s.dropout(sp, dropout)?;
    let sp = s.tape.relu(sp);
    Ok(EncodedVisual {
        mean_pool: m,
        spatial: sp,
    })
}
