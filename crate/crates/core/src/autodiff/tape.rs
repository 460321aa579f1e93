//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes. Each
//! node stores its value and the operation that produced it, so inputs always
//! precede outputs and a single reverse sweep yields every gradient.
//! [`Tape::backward`] consumes the tape.

use std::collections::HashMap;

use super::params::{ParamKey, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamKey),
    MatMul(Var, Var),
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    MeanPool(Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    /// Scalar whose value and input gradient were computed off-tape.
    External { input: Var, grad: Tensor },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ConcatCols(..) => "concat_cols",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::MaxPool { .. } => "max_pool_points",
            Op::MeanPool(..) => "mean_pool_points",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::External { .. } => "external",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Element-wise nonlinearity applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
}

/// Default hidden-layer activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight and bias handles of one affine layer (`x·W + b`).
#[derive(Debug, Clone, Copy)]
pub struct Layer {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
}

/// Parameter gradients extracted by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamKey, Tensor)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &(ParamKey, Tensor)> {
        self.entries.iter()
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::Numerical { op: id, kind: op.kind() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf. Repeated requests for the same parameter
    /// return the same node so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let key = store
            .key(name)
            .ok_or_else(|| Error::shape(format!("unknown parameter '{name}'")))?;
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let v = self.push(store.value_by_key(key).clone(), Op::Param(key))?;
        self.params.insert(key, v);
        Ok(v)
    }

    /// `W` and `b` for the layer stored as `{prefix}.w` / `{prefix}.b`.
    pub fn layer(&mut self, store: &ParamStore, prefix: &str) -> Result<Layer> {
        Ok(Layer {
            weight: self.param(store, &format!("{prefix}.w"))?,
            bias: self.param(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = Tensor::zeros(n, m);
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a 1×m bias row to every row of an n×m input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(bias) != (1, m) {
            let (br, bc) = self.shape(bias);
            return Err(Error::shape(format!("bias {br}x{bc} for {n}x{m} input")));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(m.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Linear => Ok(x),
            Activation::LeakyRelu(s) => self.leaky_relu(x, s),
        }
    }

    /// `act(x·W + b)`.
    pub fn affine(&mut self, x: Var, layer: Layer, act: Activation) -> Result<Var> {
        let h = self.matmul(x, layer.weight)?;
        let h = self.add_bias(h, layer.bias)?;
        self.activate(h, act)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.shape(a);
        let (n2, cb) = self.shape(b);
        if n != n2 {
            return Err(Error::shape(format!("concat_cols rows {n} vs {n2}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(n, ca + cb, data)?;
        self.push(out, Op::ConcatCols(a, b))
    }

    /// `n` stacked copies of a 1×d row.
    pub fn broadcast_rows(&mut self, g: Var, n: usize) -> Result<Var> {
        let (r, d) = self.shape(g);
        if r != 1 || n == 0 {
            return Err(Error::shape(format!("broadcast_rows of {r}x{d} to {n} rows")));
        }
        let row = self.value(g).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let out = Tensor::new(n, d, data)?;
        self.push(out, Op::BroadcastRows(g))
    }

    /// Column-wise maximum over rows. The winning row of each column (lowest
    /// index on ties) receives that column's gradient.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if n == 0 {
            return Err(Error::shape("max_pool_points over zero rows"));
        }
        let v = self.value(x);
        let mut best = v.row(0).to_vec();
        let mut argmax = vec![0usize; d];
        for r in 1..n {
            for (c, &val) in v.row(r).iter().enumerate() {
                if val > best[c] {
                    best[c] = val;
                    argmax[c] = r;
                }
            }
        }
        let out = Tensor::new(1, d, best)?;
        self.push(out, Op::MaxPool { input: x, argmax })
    }

    pub fn mean_pool_points(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if n == 0 {
            return Err(Error::shape("mean_pool_points over zero rows"));
        }
        let v = self.value(x);
        let mut sums = vec![0.0; d];
        for r in 0..n {
            for (s, val) in sums.iter_mut().zip(v.row(r)) {
                *s += val;
            }
        }
        let inv = 1.0 / n as f64;
        sums.iter_mut().for_each(|s| *s *= inv);
        let out = Tensor::new(1, d, sums)?;
        self.push(out, Op::MeanPool(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        self.push(out, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// A scalar computed outside the tape, attached with its gradient with
    /// respect to `input` so that backward can continue through it.
    pub fn external(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::shape(format!(
                "external gradient {:?} for input {:?}",
                grad.shape(),
                self.shape(input)
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numerical {
                op: self.nodes.len(),
                kind: "external",
            });
        }
        self.push(Tensor::scalar(value), Op::External { input, grad })
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape(format!("backward from a {r}x{c} tensor")));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.is_finite() {
                return Err(Error::Numerical { op: id, kind: node.op.kind() });
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => out.entries.push((*key, g)),
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = self.shape(*b).1;
                    let mut ga = Tensor::zeros(n, k);
                    gemm(n, m, k, g.data(), false, self.value(*b).data(), true, ga.data_mut(), false);
                    let mut gb = Tensor::zeros(k, m);
                    gemm(k, n, m, self.value(*a).data(), true, g.data(), false, gb.data_mut(), false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks_exact(m.max(1)) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *b, Tensor::new(1, m, gb)?);
                    acc(&mut grads, *x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv < 0.0 {
                            *gv *= slope;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let (n, ca) = self.shape(*a);
                    let cb = self.shape(*b).1;
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads, *a, Tensor::new(n, ca, da)?);
                    acc(&mut grads, *b, Tensor::new(n, cb, db)?);
                }
                Op::BroadcastRows(src) => {
                    let d = g.cols();
                    let mut s = vec![0.0; d];
                    for r in 0..g.rows() {
                        for (acc_v, v) in s.iter_mut().zip(g.row(r)) {
                            *acc_v += v;
                        }
                    }
                    acc(&mut grads, *src, Tensor::new(1, d, s)?);
                }
                Op::MaxPool { input, argmax } => {
                    let (n, d) = self.shape(*input);
                    let mut gx = Tensor::zeros(n, d);
                    for (c, &r) in argmax.iter().enumerate() {
                        gx.set(r, c, g.get(0, c));
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::MeanPool(input) => {
                    let (n, d) = self.shape(*input);
                    let inv = 1.0 / n as f64;
                    let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                    let mut data = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        data.extend_from_slice(&row);
                    }
                    acc(&mut grads, *input, Tensor::new(n, d, data)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().for_each(|v| *v *= c);
                    acc(&mut grads, *x, gx);
                }
                Op::AddScalar(x) => acc(&mut grads, *x, g),
                Op::Square(x) => {
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *gv *= 2.0 * xv;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    let gv = g.data()[0];
                    acc(&mut grads, *x, Tensor::new(r, c, vec![gv; r * c])?);
                }
                Op::External { input, grad } => {
                    let gv = g.data()[0];
                    let mut gx = grad.clone();
                    gx.data_mut().iter_mut().for_each(|v| *v *= gv);
                    acc(&mut grads, *input, gx);
                }
            }
        }
        out.entries.sort_by_key(|(k, _)| *k);
        Ok(out)
    }
}

/// Applies `layers` to every row of `x`: hidden layers use `hidden`, the last
/// layer uses `last`. Row i of the output depends only on row i of `x`.
pub fn shared_mlp(
    tape: &mut Tape,
    x: Var,
    layers: &[Layer],
    hidden: Activation,
    last: Activation,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let act = if i + 1 == layers.len() { last } else { hidden };
        h = tape.affine(h, *layer, act)?;
    }
    Ok(h)
}
