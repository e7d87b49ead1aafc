//! Named parameter storage, tape bindings and gradient buffers.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    WordEmbedding,
    Style,
    CaptionEncoder,
    VisualEncoder,
    CaptionBranch,
    VisualBranch,
    Projection,
    Other,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::WordEmbedding => "word_embedding",
            ParamGroup::Style => "style",
            ParamGroup::CaptionEncoder => "caption_encoder",
            ParamGroup::VisualEncoder => "visual_encoder",
            ParamGroup::CaptionBranch => "caption_branch",
            ParamGroup::VisualBranch => "visual_branch",
            ParamGroup::Projection => "projection",
            ParamGroup::Other => "other",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// All learned weights of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(-scale, scale) matrix.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid parameter shape");
        self.add(name, group, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        g.sort();
        g.dedup();
        g
    }
}

/// Lazily binds parameters of a store onto a tape as borrowed leaves.
pub struct Bindings<'p> {
    store: &'p ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'p> Bindings<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Bindings {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<'p>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| tape.borrowed(&self.store.params[id.0].value, true))
    }

    /// Adds `scale ×` the gradient of every bound parameter into `into`.
    pub fn collect(&self, grads: &Gradients, scale: f64, into: &mut ParamGrads) {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = grads.get(*v) {
                for (a, b) in into.grads[i].iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }
}

/// One dense gradient buffer per parameter, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}
