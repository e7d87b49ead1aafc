//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on it as a node whose
//! operands are earlier nodes, so the node list is already in topological
//! order. [`Tape::backward`] walks the list once in reverse and applies each
//! node's backward rule, accumulating additively into operands that fan out.
//!
//! Leaves may borrow their storage (typically from a
//! [`ParamStore`](crate::params::ParamStore)) so binding a large parameter
//! set to a fresh tape copies nothing.
//!
//! ```
//! use threem::autodiff::Tape;
//! use threem::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.leaf(Tensor::scalar(4.0));
//! let z = tape.mul(x, y).unwrap();
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[4.0]);
//! assert_eq!(grads.get(y).unwrap(), &[3.0]);
//! ```

use std::ops::Deref;

use rand::Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{check_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used to name ops in diagnostics and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale,
    AddRow,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    LogSoftmax,
    Dropout,
    Concat,
    Slice,
    Row,
    Reshape,
    Sum,
    MaskedNll,
}

/// The pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
}

enum Storage<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Deref for Storage<'_> {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Dropout(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize),
    Row(Var, usize),
    Reshape(Var),
    Sum(Var),
    /// Weighted sum of negated picked entries: `-Σ w·x[idx]`.
    MaskedNll(Var, Vec<(usize, f64)>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Dropout(..) => OpKind::Dropout,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Row(..) => OpKind::Row,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::MaskedNll(..) => OpKind::MaskedNll,
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Storage<'p>,
    op: Op,
    requires_grad: bool,
}

/// The computation record: an append-only list of executed operations.
///
/// A tape is single-threaded. Independent tapes over the same borrowed
/// parameters can run on different threads.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    fault: Option<OpKind>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales the backward rule of every `kind` node by 1.5.
    ///
    /// Exists so gradient-check failure paths can be exercised.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Concat(parts, _) => parts.iter().any(|p| self.requires_grad(*p)),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Dropout(a, _)
            | Op::Slice(a, _)
            | Op::Row(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::MaskedNll(a, _) => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            shape,
            value: Storage::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Storage<'p>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Storage::Owned(t.into_data()), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Storage::Owned(t.into_data()), false)
    }

    /// A leaf whose storage is borrowed for the lifetime of the tape.
    pub fn borrowed(&mut self, t: &'p Tensor, requires_grad: bool) -> Var {
        self.push_leaf(t.shape().to_vec(), Storage::Borrowed(t.data()), requires_grad)
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            Elementwise::Tanh | Elementwise::Sigmoid => 1,
        };
        if args.len() != arity {
            return Err(contract_err!(
                "{:?} takes {} operands, got {}",
                op,
                arity,
                args.len()
            ));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
        }
    }

    /// `[m,k] × [k,n] → [m,n]`, or `[m,k] × [k] → [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul shapes {:?} and {:?} do not conform", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        Ok(self.push(shape, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", s));
        }
        let out = transpose_raw(self.value(a), s[0], s[1]);
        Ok(self.push(vec![s[1], s[0]], out, Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{} operands have shapes {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor))
    }

    /// Adds vector `v [n]` to every row of matrix `m [r,n]`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let sv = self.shape(v).to_vec();
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(dim_err!("add_row shapes {:?} and {:?} do not conform", sm, sv));
        }
        let cols = sm[1];
        let vv = self.value(v);
        let out = self
            .value(m)
            .iter()
            .enumerate()
            .map(|(i, x)| x + vv[i % cols])
            .collect();
        Ok(self.push(sm, out, Op::AddRow(m, v)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn check_vector(&self, a: Var, what: &str) -> Result<()> {
        if self.shape(a).len() != 1 {
            return Err(dim_err!("{} needs a vector, got {:?}", what, self.shape(a)));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_vector(a, "softmax")?;
        let out = softmax_raw(self.value(a));
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_vector(a, "log_softmax")?;
        let out = log_softmax_raw(self.value(a));
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a)))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                rate
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout(a, mask)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                return Err(dim_err!(
                    "concat along axis {}: shape {:?} does not match {:?}",
                    axis,
                    s,
                    base
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Elements `start..start+len` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_vector(a, "slice")?;
        let n = self.shape(a)[0];
        if len == 0 || start + len > n {
            return Err(dim_err!("slice {}..{} of length {}", start, start + len, n));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(vec![len], out, Op::Slice(a, start)))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("row needs a matrix, got {:?}", s));
        }
        if i >= s[0] {
            return Err(Error::Parameter(format!(
                "row index {} out of range for {} rows",
                i, s[0]
            )));
        }
        let out = self.value(m)[i * s[1]..(i + 1) * s[1]].to_vec();
        Ok(self.push(vec![s[1]], out, Op::Row(m, i)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            ));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// `-Σ_(b,t) mask[b,t] · logprobs[b, t, targets[b,t]]` as a scalar.
    pub fn masked_nll_sum(
        &mut self,
        logprobs: Var,
        targets: &[Vec<usize>],
        mask: &[Vec<f64>],
    ) -> Result<Var> {
        let s = self.shape(logprobs).to_vec();
        if s.len() != 3 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(dim_err!(
                "logprobs {:?} vs {} target rows and {} mask rows",
                s,
                targets.len(),
                mask.len()
            ));
        }
        let (t_max, v) = (s[1], s[2]);
        let mut picks = Vec::new();
        for (b, (trow, mrow)) in targets.iter().zip(mask).enumerate() {
            if trow.len() != t_max || mrow.len() != t_max {
                return Err(dim_err!("row {} of targets/mask is not length {}", b, t_max));
            }
            for (t, (&tok, &m)) in trow.iter().zip(mrow).enumerate() {
                if m != 0.0 {
                    if tok >= v {
                        return Err(dim_err!("target id {} outside vocabulary {}", tok, v));
                    }
                    picks.push(((b * t_max + t) * v + tok, m));
                }
            }
        }
        let lp = self.value(logprobs);
        let total = -picks.iter().map(|&(i, w)| w * lp[i]).sum::<f64>();
        Ok(self.push(vec![1], vec![total], Op::MaskedNll(logprobs, picks)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.value(*b).len() / k;
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(self.value(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(self.value(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let back = transpose_raw(g, s[1], s[0]);
                self.accumulate(grads, *a, &back);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|g| g * f).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddRow(m, v) => {
                self.accumulate(grads, *m, g);
                let cols = self.shape(*v)[0];
                let mut dv = vec![0.0; cols];
                for (i, x) in g.iter().enumerate() {
                    dv[i % cols] += x;
                }
                self.accumulate(grads, *v, &dv);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(out.iter()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(out.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out.iter()).map(|(g, y)| g * y).sum();
                let da: Vec<f64> = g.iter().zip(out.iter()).map(|(g, y)| y * (g - dot)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let gs: f64 = g.iter().sum();
                let da: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(g, y)| g - y.exp() * gs)
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Dropout(a, mask) => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Concat(parts, axis) => {
                let base = &node.shape;
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let row = base[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(block * outer);
                        for o in 0..outer {
                            let start = o * row + offset;
                            dp.extend_from_slice(&g[start..start + block]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += block;
                }
            }
            Op::Slice(a, start) => {
                self.accumulate_at(grads, *a, *start, g);
            }
            Op::Row(m, i) => {
                let cols = self.shape(*m)[1];
                self.accumulate_at(grads, *m, i * cols, g);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                self.accumulate(grads, *a, &da);
            }
            Op::MaskedNll(a, picks) => {
                if self.requires_grad(*a) {
                    let slot = self.grad_slot(grads, *a);
                    for &(i, w) in picks {
                        slot[i] -= w * g[0];
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = self.grad_slot(grads, v);
        for (s, x) in slot.iter_mut().zip(d) {
            *s += x;
        }
    }

    fn accumulate_at(&self, grads: &mut [Option<Vec<f64>>], v: Var, offset: usize, d: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = self.grad_slot(grads, v);
        for (s, x) in slot[offset..offset + d.len()].iter_mut().zip(d) {
            *s += x;
        }
    }
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root (or needs no gradient).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_raw(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn log_softmax_raw(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
