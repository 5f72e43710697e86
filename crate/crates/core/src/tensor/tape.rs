//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] replays the records in reverse order and returns the
//! gradient of a scalar loss with respect to every node that depends on a
//! [`Tape::param`] leaf. Tapes are rebuilt for every forward pass.

use super::array::{self, conv_dims, Array, ConvDims};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = array::matmul(self.value(a), self.value(b))?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let dims = conv_dims(self.value(input), self.value(kernel), self.value(bias))?;
        let value =
            array::conv2d_unchecked(self.value(input), self.value(kernel), self.value(bias), dims);
        let g = self.grad_flag(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            g,
        ))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let value = match kind {
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Sigmoid => x.map(array::sigmoid),
            Unary::Square => x.map(|v| v * v),
        };
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Unary(kind, a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Pointwise binary op on equal shapes; either side may be a
    /// one-element array, which is broadcast.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |p: f64, q: f64| p + q,
            Binary::Sub => |p: f64, q: f64| p - q,
            Binary::Mul => |p: f64, q: f64| p * q,
            Binary::Div => |p: f64, q: f64| p / q,
        };
        let value = if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Array::new(x.shape().to_vec(), data)?
        } else if y.is_scalar() {
            let q = y.item();
            x.map(|p| f(p, q))
        } else if x.is_scalar() {
            let p = x.item();
            y.map(|q| f(p, q))
        } else {
            return Err(Error::dim(format!(
                "{kind:?}: shapes {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        };
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    /// Sum of all entries, as a one-element array.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    /// `out[k] = src[indices[k]]` (flat indexing), reshaped to `shape`.
    pub fn gather(&mut self, src: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let s = self.value(src).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {} values",
                s.len()
            )));
        }
        let data = indices.iter().map(|&i| s[i]).collect();
        let value = Array::new(shape, data)?;
        let g = self.grad_flag(&[src]);
        Ok(self.push(value, Op::Gather(src, indices), g))
    }

    /// Flat concatenation of all inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of nothing"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Array::vector(data);
        let g = self.grad_flag(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(value, Op::Reshape(a), g))
    }

    /// `Σ (a − b)²` over all entries.
    pub fn l2_squared(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a)
            .check_same_shape(self.value(b), "l2_squared")?;
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, array::matmul_nt(g, bv));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, array::matmul_tn(av, g));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let (gi, gk, gb) = array::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *dims,
                    self.wants(*input),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if self.wants(*kernel) {
                    accumulate(grads, *kernel, gk);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let data = match kind {
                    Unary::Relu => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Unary::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect(),
                    Unary::Square => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| 2.0 * v * gv)
                        .collect(),
                };
                accumulate(grads, *a, with_shape(x, data));
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let n = node.value.len();
                let xa = |k: usize| x.data()[if x.is_scalar() { 0 } else { k }];
                let yb = |k: usize| y.data()[if y.is_scalar() { 0 } else { k }];
                let (da, db): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|k| {
                        let gv = g.data()[k];
                        match kind {
                            Binary::Add => (gv, gv),
                            Binary::Sub => (gv, -gv),
                            Binary::Mul => (gv * yb(k), gv * xa(k)),
                            Binary::Div => {
                                let q = yb(k);
                                (gv / q, -gv * xa(k) / (q * q))
                            }
                        }
                    })
                    .unzip();
                if self.wants(*a) {
                    accumulate(grads, *a, reduce_to(x, da));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reduce_to(y, db));
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Array::full(x.shape(), g.item()));
            }
            Op::Gather(src, indices) => {
                let x = self.value(*src);
                let mut data = vec![0.0; x.len()];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    data[i] += gv;
                }
                accumulate(grads, *src, with_shape(x, data));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let n = x.len();
                    if self.wants(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        accumulate(grads, p, with_shape(x, data));
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, with_shape(x, g.data().to_vec()));
            }
        }
    }
}

fn with_shape(like: &Array, data: Vec<f64>) -> Array {
    Array::new(like.shape().to_vec(), data).expect("gradient shape mirrors value")
}

/// Sum a full-size gradient down to a broadcast scalar operand when needed.
fn reduce_to(like: &Array, data: Vec<f64>) -> Array {
    if like.is_scalar() && data.len() != 1 {
        Array::new(like.shape().to_vec(), vec![data.iter().sum()]).unwrap()
    } else {
        with_shape(like, data)
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` does not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Array) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(like.shape()))
    }
}
