use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::{cst, Real, Tensor};
use crate::error::{config_err, usage_err, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Square,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Softmax { outer: usize, n: usize, inner: usize },
    Conv2d(ConvGeometry),
    Dense,
    Reshape,
    Slice { start: usize },
    Transpose { groups: usize, rows: usize, cols: usize },
    Squash { dim: usize, eps: f64 },
    RowNorm { dim: usize },
    CapsPredict { in_dim: usize, rows: usize },
    WeightedSum { outputs: usize, dim: usize },
    Agreement { outputs: usize, dim: usize },
}

enum Value<'a, T: Real> {
    Borrowed(&'a Tensor<T>),
    Owned(Tensor<T>),
}

impl<T: Real> Value<'_, T> {
    fn tensor(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

struct Node<'a, T: Real> {
    op: Op,
    inputs: Vec<usize>,
    value: Value<'a, T>,
    requires_grad: bool,
}

/// Operations recorded during one forward pass, replayed in reverse by
/// [`Graph::backward`].
///
/// Nodes are appended in execution order, so the node list is a topological
/// order by construction. Parameters enter by reference through
/// [`Graph::param`]; their gradients accumulate in the graph across
/// `backward` calls until [`Graph::zero_grad`].
pub struct Graph<'a, T: Real = f32> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Value<'a, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn push_op(&mut self, op: Op, inputs: &[Var], value: Tensor<T>) -> Var {
        let inputs: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(op, inputs, Value::Owned(value), requires_grad)
    }

    /// Trainable tensor borrowed for the lifetime of the graph.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(Op::Leaf, Vec::new(), Value::Borrowed(tensor), true)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, Vec::new(), Value::Owned(tensor), true)
    }

    /// Owned leaf treated as a constant.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, Vec::new(), Value::Owned(tensor), false)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(usage_err!("variable {var:?} does not belong to graph {}", self.id));
        }
        Ok(())
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        self.check(var)?;
        Ok(self.nodes[var.index].value.tensor())
    }

    fn val(&self, var: Var) -> &Tensor<T> {
        self.nodes[var.index].value.tensor()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, var: Var) -> Result<Option<&[T]>> {
        self.check(var)?;
        Ok(self.leaf_grads.get(var.index).and_then(|g| g.as_deref()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.val(a).shape() != self.val(b).shape() {
            return Err(config_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(op, &[a, b], out))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).map(f);
        Ok(self.push_op(op, &[x], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = cst::<T>(c);
        self.unary(Op::Scale(c), x, |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = cst::<T>(c);
        self.unary(Op::AddScalar, x, |v| v + k)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, kernels::sigmoid)
    }

    pub fn elementwise(&mut self, x: Var, f: Activation) -> Result<Var> {
        match f {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.val(x).data().iter().copied().sum();
        Ok(self.push_op(Op::Sum, &[x], Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / cst::<T>(t.len() as f64);
        Ok(self.push_op(Op::Mean, &[x], Tensor::scalar(m)))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(config_err!("softmax axis {axis} out of range for shape {shape:?}"));
        }
        let outer = shape[..axis].iter().product();
        let n = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let data = kernels::softmax_forward(t.data(), outer, n, inner);
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(Op::Softmax { outer, n, inner }, &[x], out))
    }

    /// Valid (unpadded) 2-D convolution of `[C_in, H, W]` with
    /// `[C_out, C_in, k, k]` kernels plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        for v in [input, kernels, bias] {
            self.check(v)?;
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        let (xs, ks, bs) = (self.val(input).shape(), self.val(kernels).shape(), self.val(bias).shape());
        let [c, h, w] = xs else {
            return Err(config_err!("conv2d input must be [C,H,W], got {xs:?}"));
        };
        let [o, kc, kh, kw] = ks else {
            return Err(config_err!("conv2d kernels must be [C_out,C_in,k,k], got {ks:?}"));
        };
        if kc != c || kh != kw {
            return Err(config_err!("conv2d kernels {ks:?} do not fit input {xs:?}"));
        }
        if kh > h || kw > w {
            return Err(config_err!("conv2d kernel {kh}x{kw} larger than input {h}x{w}"));
        }
        if bs != [*o] {
            return Err(config_err!("conv2d bias must be [{o}], got {bs:?}"));
        }
        let geo = ConvGeometry { in_channels: *c, height: *h, width: *w, out_channels: *o, kernel: *kh, stride };
        let data = kernels::conv2d_forward(self.val(input).data(), self.val(kernels).data(), self.val(bias).data(), &geo);
        let out = Tensor::new(vec![*o, geo.out_height(), geo.out_width()], data)?;
        Ok(self.push_op(Op::Conv2d(geo), &[input, kernels, bias], out))
    }

    /// `weight · input + bias` for `input: [n]`, `weight: [m, n]`, `bias: [m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (xs, ws, bs) = (self.val(input).shape(), self.val(weight).shape(), self.val(bias).shape());
        let (&[n], &[m, wn], &[bm]) = (xs, ws, bs) else {
            return Err(config_err!("dense expects [n], [m,n], [m]; got {xs:?}, {ws:?}, {bs:?}"));
        };
        if wn != n || bm != m {
            return Err(config_err!("dense shapes do not conform: {xs:?}, {ws:?}, {bs:?}"));
        }
        let data = kernels::dense_forward(self.val(input).data(), self.val(weight).data(), self.val(bias).data());
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push_op(Op::Dense, &[input, weight, bias], out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(Op::Reshape, &[x], out))
    }

    /// Contiguous flat range `[start, start + prod(shape))`, viewed as `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let len: usize = shape.iter().product();
        let src = self.val(x).data();
        if start + len > src.len() {
            return Err(config_err!("slice {start}..{} out of range {}", start + len, src.len()));
        }
        let out = Tensor::new(shape.to_vec(), src[start..start + len].to_vec())?;
        Ok(self.push_op(Op::Slice { start }, &[x], out))
    }

    /// `[G, R, C] -> [G, C, R]`
    pub fn transpose_groups(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x);
        let &[groups, rows, cols] = t.shape() else {
            return Err(config_err!("transpose_groups expects a rank-3 tensor, got {:?}", t.shape()));
        };
        let data = kernels::transpose_groups(t.data(), groups, rows, cols);
        let out = Tensor::new(vec![groups, cols, rows], data)?;
        Ok(self.push_op(Op::Transpose { groups, rows, cols }, &[x], out))
    }

    /// Capsule squash applied to every row of the last axis:
    /// `v * |v|^2 / ((1 + |v|^2) * sqrt(|v|^2 + eps))`.
    pub fn squash(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x);
        let dim = *t.shape().last().unwrap();
        let data = kernels::squash_forward(t.data(), dim, cst(eps));
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Squash { dim, eps }, &[x], out))
    }

    /// Euclidean norm of every row of the last axis.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x);
        let shape = t.shape();
        let dim = *shape.last().unwrap();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let out = Tensor::new(out_shape, kernels::row_norm_forward(t.data(), dim))?;
        Ok(self.push_op(Op::RowNorm { dim }, &[x], out))
    }

    /// Per-capsule predictions `uhat[i,j] = W[i,j] · u[i]` for
    /// `u: [n, in_dim]`, `W: [n, outputs, out_dim, in_dim]`.
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        self.check(u)?;
        self.check(w)?;
        let (us, ws) = (self.val(u).shape(), self.val(w).shape());
        let (&[n, in_dim], &[wn, outputs, out_dim, w_in]) = (us, ws) else {
            return Err(config_err!("caps_predict expects [n,d] and [n,j,e,d]; got {us:?}, {ws:?}"));
        };
        if wn != n || w_in != in_dim {
            return Err(config_err!("caps_predict shapes do not conform: {us:?}, {ws:?}"));
        }
        let data = kernels::caps_predict_forward(self.val(u).data(), self.val(w).data(), in_dim, outputs * out_dim);
        let out = Tensor::new(vec![n, outputs, out_dim], data)?;
        Ok(self.push_op(Op::CapsPredict { in_dim, rows: outputs * out_dim }, &[u, w], out))
    }

    /// `s[j] = Σ_i c[i,j] · uhat[i,j]` for `c: [n, J]`, `uhat: [n, J, D]`.
    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        self.check(c)?;
        self.check(uhat)?;
        let (cs, us) = (self.val(c).shape(), self.val(uhat).shape());
        let (&[n, outputs], &[un, uj, dim]) = (cs, us) else {
            return Err(config_err!("weighted_sum expects [n,J] and [n,J,D]; got {cs:?}, {us:?}"));
        };
        if un != n || uj != outputs {
            return Err(config_err!("weighted_sum shapes do not conform: {cs:?}, {us:?}"));
        }
        let data = kernels::weighted_sum_forward(self.val(c).data(), self.val(uhat).data(), outputs, dim);
        let out = Tensor::new(vec![outputs, dim], data)?;
        Ok(self.push_op(Op::WeightedSum { outputs, dim }, &[c, uhat], out))
    }

    /// `a[i,j] = uhat[i,j] · v[j]` for `uhat: [n, J, D]`, `v: [J, D]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        self.check(uhat)?;
        self.check(v)?;
        let (us, vs) = (self.val(uhat).shape(), self.val(v).shape());
        let (&[n, outputs, dim], &[vj, vd]) = (us, vs) else {
            return Err(config_err!("agreement expects [n,J,D] and [J,D]; got {us:?}, {vs:?}"));
        };
        if vj != outputs || vd != dim {
            return Err(config_err!("agreement shapes do not conform: {us:?}, {vs:?}"));
        }
        let data = kernels::agreement_forward(self.val(uhat).data(), self.val(v).data(), outputs, dim);
        let out = Tensor::new(vec![n, outputs], data)?;
        Ok(self.push_op(Op::Agreement { outputs, dim }, &[uhat, v], out))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.val(loss).len() != 1 {
            return Err(usage_err!("backward needs a scalar loss, got shape {:?}", self.val(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => kernels::add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|&k| self.nodes[k].requires_grad).collect();
            let input_grads = self.node_backward(i, &g, &need);
            for (&k, gk) in node.inputs.iter().zip(input_grads) {
                let Some(gk) = gk else { continue };
                match &mut grads[k] {
                    Some(acc) => kernels::add_into(acc, &gk),
                    slot => *slot = Some(gk),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let input = |k: usize| self.nodes[node.inputs[k]].value.tensor().data();
        let out = node.value.tensor().data();
        let one = |f: &dyn Fn() -> Vec<T>| vec![need[0].then(f)];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())],
            Op::Sub => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.iter().map(|&v| -v).collect())],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                vec![
                    need[0].then(|| g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect()),
                    need[1].then(|| g.iter().zip(a).map(|(&gv, &av)| gv * av).collect()),
                ]
            }
            Op::Scale(c) => {
                let k = cst::<T>(*c);
                one(&|| g.iter().map(|&v| v * k).collect())
            }
            Op::AddScalar | Op::Reshape => one(&|| g.to_vec()),
            Op::Square => {
                let two = cst::<T>(2.0);
                one(&|| g.iter().zip(input(0)).map(|(&gv, &x)| two * x * gv).collect())
            }
            // relu'(0) = 0
            Op::Relu => one(&|| g.iter().zip(input(0)).map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() }).collect()),
            Op::Sigmoid => one(&|| g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::one() - y)).collect()),
            Op::Sum => one(&|| vec![g[0]; input(0).len()]),
            Op::Mean => {
                let n = input(0).len();
                one(&|| vec![g[0] / cst::<T>(n as f64); n])
            }
            Op::Softmax { outer, n, inner } => one(&|| kernels::softmax_backward(out, g, *outer, *n, *inner)),
            Op::Conv2d(geo) => {
                let gr = kernels::conv2d_backward(input(0), input(1), g, geo, [need[0], need[1], need[2]]);
                vec![gr.input, gr.kernels, gr.bias]
            }
            Op::Dense => kernels::dense_backward(input(0), input(1), g, [need[0], need[1], need[2]]).into(),
            Op::Slice { start } => one(&|| {
                let mut gx = vec![T::zero(); input(0).len()];
                gx[*start..*start + g.len()].copy_from_slice(g);
                gx
            }),
            Op::Transpose { groups, rows, cols } => one(&|| kernels::transpose_groups(g, *groups, *cols, *rows)),
            Op::Squash { dim, eps } => one(&|| kernels::squash_backward(input(0), g, *dim, cst(*eps))),
            Op::RowNorm { dim } => one(&|| kernels::row_norm_backward(input(0), out, g, *dim)),
            Op::CapsPredict { in_dim, rows } => {
                kernels::caps_predict_backward(input(0), input(1), g, *in_dim, *rows, [need[0], need[1]]).into()
            }
            Op::WeightedSum { outputs, dim } => {
                kernels::weighted_sum_backward(input(0), input(1), g, *outputs, *dim, [need[0], need[1]]).into()
            }
            Op::Agreement { outputs, dim } => {
                kernels::agreement_backward(input(0), input(1), g, *outputs, *dim, [need[0], need[1]]).into()
            }
        }
    }
}
