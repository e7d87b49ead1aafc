//! Forward-pass context and the affine layer shared by several modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{Bindings, ParamGrads, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// A tape bound to a parameter store, plus the train/eval mode and the
/// dropout generator for one forward pass.
pub struct Session<'p> {
    pub tape: Tape<'p>,
    pub bind: Bindings<'p>,
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, training: bool, seed: u64) -> Self {
        Session {
            tape: Tape::new(),
            bind: Bindings::new(params),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval(params: &'p ParamStore) -> Self {
        Self::new(params, false, 0)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.bind.var(&mut self.tape, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[n]))
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.training, &mut self.rng)
    }

    /// Backpropagates from `root` and adds `scale ×` the parameter gradients
    /// into `into`.
    pub fn accumulate_grads(&self, root: Var, scale: f64, into: &mut ParamGrads) -> Result<Gradients> {
        let grads = self.tape.backward(root)?;
        self.bind.collect(&grads, scale, into);
        Ok(grads)
    }
}

/// `y = W x + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        output_dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, &[output_dim, input_dim], init_scale, rng);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[output_dim]));
        Linear {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        if s.tape.shape(x) != [self.input_dim] {
            return Err(dim_err!(
                "linear layer expects input [{}], got {:?}",
                self.input_dim,
                s.tape.shape(x)
            ));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.matmul(w, x)?;
        s.tape.add(y, b)
    }

    /// Applies the layer to every row of `x: [n, in]`, giving `[n, out]`.
    pub fn forward_rows(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(dim_err!(
                "linear layer expects rows of width {}, got {:?}",
                self.input_dim,
                shape
            ));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let wt = s.tape.transpose(w)?;
        let y = s.tape.matmul(x, wt)?;
        s.tape.add_row(y, b)
    }
}
