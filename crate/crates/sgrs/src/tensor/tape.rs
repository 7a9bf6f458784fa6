//! Define-by-run gradient tape.
//!
//! Each operation records a node holding its output activation, so the
//! reverse pass can consume nodes in reverse insertion order, which is a
//! valid topological order for an append-only graph. Every forward output
//! is checked for finiteness the moment it is produced; training aborts at
//! the first operation that yields a NaN or infinity rather than letting
//! it propagate.

use std::cell::RefCell;

use super::{kernels, lit, Scalar, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        padding: usize,
    },
    Softmax(usize),
    Relu(usize),
    MaxPool2(usize),
    Upsample2(usize),
    Concat(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScalarMul(usize, f64),
    ScalarAdd(usize, f64),
    Ln(usize),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax(_) => "softmax",
            Op::Relu(_) => "relu",
            Op::MaxPool2(_) => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Concat(..) => "concat",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScalarMul(..) => "scalar_mul",
            Op::ScalarAdd(..) => "scalar_add",
            Op::Ln(_) => "ln",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor. Gradients are tracked through it only
    /// when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Value> {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Registers a tensor that gradients never flow into.
    pub fn constant(&self, value: Tensor<T>) -> Result<Value> {
        self.leaf(value, false)
    }

    /// Registers a one-element constant.
    pub fn scalar_const(&self, x: f64) -> Result<Value> {
        self.constant(Tensor::scalar(lit::<T>(x)))
    }

    /// Clone of the activation stored at `v`.
    pub fn value(&self, v: Value) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn dims(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Value) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn conv2d(&self, input: Value, kernel: Value, bias: Value, padding: usize) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let (i, k, b) = (&nodes[input.0], &nodes[kernel.0], &nodes[bias.0]);
            let (id, kd, bd) = (i.value.dims(), k.value.dims(), b.value.dims());
            if id.len() != 4 || kd.len() != 4 || bd.len() != 1 {
                return Err(shape_err(format!(
                    "conv2d expects input [N,C,H,W], kernel [Co,Ci,Kh,Kw], bias [Co]; got {id:?}, {kd:?}, {bd:?}"
                )));
            }
            if kd[1] != id[1] || bd[0] != kd[0] {
                return Err(shape_err(format!(
                    "conv2d channel mismatch: input has {} channels, kernel expects {}, bias covers {}",
                    id[1], kd[1], bd[0]
                )));
            }
            if kd[2] % 2 == 0 || kd[3] % 2 == 0 {
                return Err(shape_err(format!(
                    "conv2d kernel extents must be odd, got {}x{}",
                    kd[2], kd[3]
                )));
            }
            match kernels::conv2d_out_dims(id, kd, padding) {
                Some((_, _, ho, wo)) if ho > 0 && wo > 0 => {}
                _ => {
                    return Err(shape_err(format!(
                        "conv2d output would be empty for input {id:?}, kernel {kd:?}, padding {padding}"
                    )))
                }
            }
            (
                kernels::conv2d_forward(&i.value, &k.value, &b.value, padding),
                i.requires_grad || k.requires_grad || b.requires_grad,
            )
        };
        self.push(
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                padding,
            },
            out,
            rg,
        )
    }

    pub fn softmax(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            if n.value.dims().len() != 4 {
                return Err(shape_err(format!(
                    "softmax expects [N,C,H,W], got {:?}",
                    n.value.dims()
                )));
            }
            (kernels::softmax_forward(&n.value), n.requires_grad)
        };
        self.push(Op::Softmax(input.0), out, rg)
    }

    pub fn relu(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            (kernels::relu_forward(&n.value), n.requires_grad)
        };
        self.push(Op::Relu(input.0), out, rg)
    }

    pub fn maxpool2(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            let d = n.value.dims();
            if d.len() != 4 || d[2] % 2 != 0 || d[3] % 2 != 0 {
                return Err(shape_err(format!(
                    "maxpool2 expects [N,C,H,W] with even H and W, got {d:?}"
                )));
            }
            (kernels::maxpool2_forward(&n.value), n.requires_grad)
        };
        self.push(Op::MaxPool2(input.0), out, rg)
    }

    pub fn upsample2(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            if n.value.dims().len() != 4 {
                return Err(shape_err(format!(
                    "upsample2 expects [N,C,H,W], got {:?}",
                    n.value.dims()
                )));
            }
            (kernels::upsample2_forward(&n.value), n.requires_grad)
        };
        self.push(Op::Upsample2(input.0), out, rg)
    }

    pub fn concat(&self, a: Value, b: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (da, db) = (na.value.dims(), nb.value.dims());
            if da.len() != 4
                || db.len() != 4
                || da[0] != db[0]
                || da[2] != db[2]
                || da[3] != db[3]
            {
                return Err(shape_err(format!(
                    "concat expects matching batch and spatial dims, got {da:?} and {db:?}"
                )));
            }
            (
                kernels::concat_forward(&na.value, &nb.value),
                na.requires_grad || nb.requires_grad,
            )
        };
        self.push(Op::Concat(a.0, b.0), out, rg)
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value> {
        self.zip_op(a, b, "add", |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value> {
        self.zip_op(a, b, "sub", |x, y| x - y, |a, b| Op::Sub(a, b))
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value> {
        self.zip_op(a, b, "mul", |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    pub fn div(&self, a: Value, b: Value) -> Result<Value> {
        self.zip_op(a, b, "div", |x, y| x / y, |a, b| Op::Div(a, b))
    }

    pub fn scalar_mul(&self, input: Value, c: f64) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            (n.value.map(|v| v * lit::<T>(c)), n.requires_grad)
        };
        self.push(Op::ScalarMul(input.0, c), out, rg)
    }

    pub fn scalar_add(&self, input: Value, c: f64) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            (n.value.map(|v| v + lit::<T>(c)), n.requires_grad)
        };
        self.push(Op::ScalarAdd(input.0, c), out, rg)
    }

    /// Natural log with the argument clamped from below, so masked-out
    /// zero probabilities stay finite.
    pub fn ln(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            (kernels::ln_forward(&n.value), n.requires_grad)
        };
        self.push(Op::Ln(input.0), out, rg)
    }

    pub fn sum(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            (Tensor::scalar(kernels::sum_all(&n.value)), n.requires_grad)
        };
        self.push(Op::Sum(input.0), out, rg)
    }

    pub fn mean(&self, input: Value) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[input.0];
            let len = lit::<T>(n.value.len() as f64);
            (
                Tensor::scalar(kernels::sum_all(&n.value) / len),
                n.requires_grad,
            )
        };
        self.push(Op::Mean(input.0), out, rg)
    }

    fn zip_op(
        &self,
        a: Value,
        b: Value,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Value> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.value.dims() != nb.value.dims() {
                return Err(shape_err(format!(
                    "{name} expects matching shapes, got {:?} and {:?}",
                    na.value.dims(),
                    nb.value.dims()
                )));
            }
            let data: Vec<T> = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(na.value.dims().to_vec(), data)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        self.push(op(a.0, b.0), out, rg)
    }

    fn push(&self, op: Op, value: Tensor<T>, requires_grad: bool) -> Result<Value> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Value(nodes.len() - 1))
    }

    /// Reverse pass from a scalar node. Returns per-node gradients; nodes
    /// the loss does not depend on (or that do not require gradients) have
    /// none.
    pub fn backward(&self, loss: Value) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.0 >= n {
            return Err(contract_err("backward target is not on this tape"));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(contract_err(format!(
                "backward target must be a scalar, got shape {:?}",
                nodes[loss.0].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(
            nodes[loss.0].value.dims().to_vec(),
            T::one(),
        ));

        for i in (0..n).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |j: usize| nodes[j].requires_grad;
            match nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                } => {
                    let (di, dk, db) = kernels::conv2d_backward(
                        &nodes[input].value,
                        &nodes[kernel].value,
                        &g,
                        padding,
                        needs(input),
                        needs(kernel),
                        needs(bias),
                    );
                    if let Some(d) = di {
                        accumulate(&mut grads[input], d);
                    }
                    if let Some(d) = dk {
                        accumulate(&mut grads[kernel], d);
                    }
                    if let Some(d) = db {
                        accumulate(&mut grads[bias], d);
                    }
                }
                Op::Softmax(input) => {
                    if needs(input) {
                        let d = kernels::softmax_backward(&nodes[i].value, &g);
                        accumulate(&mut grads[input], d);
                    }
                }
                Op::Relu(input) => {
                    if needs(input) {
                        let d = kernels::relu_backward(&nodes[input].value, &g);
                        accumulate(&mut grads[input], d);
                    }
                }
                Op::MaxPool2(input) => {
                    if needs(input) {
                        let d = kernels::maxpool2_backward(&nodes[input].value, &g);
                        accumulate(&mut grads[input], d);
                    }
                }
                Op::Upsample2(input) => {
                    if needs(input) {
                        let d = kernels::upsample2_backward(&nodes[input].value, &g);
                        accumulate(&mut grads[input], d);
                    }
                }
                Op::Concat(a, b) => {
                    let (da, db) = kernels::concat_backward(
                        nodes[a].value.dims(),
                        nodes[b].value.dims(),
                        &g,
                    );
                    if needs(a) {
                        accumulate(&mut grads[a], da);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a], zip_mul(&g, &nodes[b].value));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], zip_mul(&g, &nodes[a].value));
                    }
                }
                Op::Div(a, b) => {
                    if needs(a) {
                        let d = zip_with(&g, &nodes[b].value, |gv, bv| gv / bv);
                        accumulate(&mut grads[a], d);
                    }
                    if needs(b) {
                        let quot = zip_with(&nodes[a].value, &nodes[b].value, |av, bv| {
                            av / (bv * bv)
                        });
                        let d = zip_with(&g, &quot, |gv, qv| -(gv * qv));
                        accumulate(&mut grads[b], d);
                    }
                }
                Op::ScalarMul(input, c) => {
                    if needs(input) {
                        accumulate(&mut grads[input], g.map(|v| v * lit::<T>(c)));
                    }
                }
                Op::ScalarAdd(input, _) => {
                    if needs(input) {
                        accumulate(&mut grads[input], g.clone());
                    }
                }
                Op::Ln(input) => {
                    if needs(input) {
                        let d = kernels::ln_backward(&nodes[input].value, &g);
                        accumulate(&mut grads[input], d);
                    }
                }
                Op::Sum(input) => {
                    if needs(input) {
                        let gi = g.item();
                        accumulate(
                            &mut grads[input],
                            Tensor::full(nodes[input].value.dims().to_vec(), gi),
                        );
                    }
                }
                Op::Mean(input) => {
                    if needs(input) {
                        let len = lit::<T>(nodes[input].value.len() as f64);
                        let gi = g.item() / len;
                        accumulate(
                            &mut grads[input],
                            Tensor::full(nodes[input].value.dims().to_vec(), gi),
                        );
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (i, slot) in grads.iter().enumerate() {
            if let Some(t) = slot {
                if !t.all_finite() {
                    return Err(Error::Numeric(format!(
                        "gradient of {} output is non-finite",
                        nodes[i].op.name()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Recomputes every recorded operation from its stored inputs and
    /// verifies the stored activations are reproduced bit for bit.
    pub fn replay_check(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            let v = |j: usize| &nodes[j].value;
            let recomputed = match node.op {
                Op::Leaf => continue,
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                } => kernels::conv2d_forward(v(input), v(kernel), v(bias), padding),
                Op::Softmax(input) => kernels::softmax_forward(v(input)),
                Op::Relu(input) => kernels::relu_forward(v(input)),
                Op::MaxPool2(input) => kernels::maxpool2_forward(v(input)),
                Op::Upsample2(input) => kernels::upsample2_forward(v(input)),
                Op::Concat(a, b) => kernels::concat_forward(v(a), v(b)),
                Op::Add(a, b) => zip_with(v(a), v(b), |x, y| x + y),
                Op::Sub(a, b) => zip_with(v(a), v(b), |x, y| x - y),
                Op::Mul(a, b) => zip_with(v(a), v(b), |x, y| x * y),
                Op::Div(a, b) => zip_with(v(a), v(b), |x, y| x / y),
                Op::ScalarMul(input, c) => v(input).map(|x| x * lit::<T>(c)),
                Op::ScalarAdd(input, c) => v(input).map(|x| x + lit::<T>(c)),
                Op::Ln(input) => kernels::ln_forward(v(input)),
                Op::Sum(input) => Tensor::scalar(kernels::sum_all(v(input))),
                Op::Mean(input) => {
                    let len = lit::<T>(v(input).len() as f64);
                    Tensor::scalar(kernels::sum_all(v(input)) / len)
                }
            };
            if !bit_equal(&recomputed, &node.value) {
                return Err(contract_err(format!(
                    "replay of {} at node {i} did not reproduce the recorded activation",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }
}

/// Gradients keyed by tape node, as produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                *a = *a + *b;
            }
        }
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.dims().to_vec(), data).unwrap()
}

fn zip_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_with(a, b, |x, y| x * y)
}

fn bit_equal<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.dims() == b.dims()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_le_bytes() == y.to_le_bytes())
}
