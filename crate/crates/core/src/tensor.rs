//! Dense tensors and a define-by-run tape for reverse-mode gradients.
//!
//! Every differentiable quantity in the crate is built by recording
//! operations on a [`Tape`]. Values are computed eagerly; [`Tape::backward`]
//! walks the record in exact reverse order and accumulates gradients.
//! A tape supports one backward pass; call [`Tape::reset`] to reuse it.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Every dimension must be positive and `data.len()` must equal their
    /// product. An empty shape is a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient buffer per input (same
/// length as that input).
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatVec { w: Var, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Prelu { x: Var, leak: Var },
    Softsign(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampExp { x: Var, lo: f64, hi: f64 },
    Floor { x: Var, floor: f64 },
    LogSoftmax(Var),
    Sum(Var),
    SparseDot { x: Var, idx: Vec<usize>, weights: Vec<f64> },
    Concat(Vec<Var>),
    AddN(Vec<Var>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` did not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; self.sizes.get(v.0).copied().unwrap_or(0)],
        }
    }

    /// Moves the gradient out, leaving the slot empty.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let g = std::mem::take(&mut self.grads[v.0]);
        if g.is_empty() {
            vec![0.0; self.sizes[v.0]]
        } else {
            g
        }
    }
}

fn accumulate(slot: &mut Vec<f64>, len: usize, f: impl FnOnce(&mut [f64])) {
    if slot.is_empty() {
        slot.resize(len, 0.0);
    }
    f(slot);
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every recorded operation so the tape can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Records an input. Gradients are only tracked through leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `w·x + b` for `x: [m]`, `w: [k, m]`, `b: [k]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matvec_values("affine", w, x)?;
        if self.shape(b) != [y.len()] {
            return Err(Error::shape("affine", self.shape(b), &[y.len()]));
        }
        let data = y.iter().zip(self.data(b)).map(|(a, c)| a + c).collect();
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::vector(data), Op::Affine { x, w, b }, rg))
    }

    /// `w·x` for `x: [m]`, `w: [k, m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let y = self.matvec_values("matvec", w, x)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::vector(y), Op::MatVec { w, x }, rg))
    }

    fn matvec_values(&self, op: &'static str, w: Var, x: Var) -> Result<Vec<f64>> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::shape(op, ws, xs));
        }
        let m = ws[1];
        let xd = self.data(x);
        Ok(self
            .data(w)
            .chunks_exact(m)
            .map(|row| row.iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if self.nodes[x.0].value.len() != c.len() {
            return Err(Error::shape("mul_const", self.shape(x), &[c.len()]));
        }
        let data = self.data(x).iter().zip(c).map(|(a, b)| a * b).collect();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, c.to_vec()), rg))
    }

    /// Parametric ReLU: `x` when `x >= 0`, `leak * x` otherwise. `leak` is
    /// either one value or one per element. The derivative at exactly zero
    /// takes the positive branch.
    pub fn prelu(&mut self, x: Var, leak: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let nl = self.nodes[leak.0].value.len();
        if nl != 1 && nl != n {
            return Err(Error::shape("prelu", self.shape(x), self.shape(leak)));
        }
        let ld = self.data(leak);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { ld[if nl == 1 { 0 } else { i }] * v })
            .collect();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let rg = self.rg(&[x, leak]);
        Ok(self.push(value, Op::Prelu { x, leak }, rg))
    }

    /// `v / (1 + |v|)`.
    pub fn softsign(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softsign(x), |v| v / (1.0 + v.abs()))
    }

    /// `ln(1 + e^v)`, overflow-safe.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    /// `exp(clamp(v, lo, hi))`; zero gradient where the clamp is active.
    pub fn exp_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::ClampExp { x, lo, hi }, |v| v.clamp(lo, hi).exp())
    }

    /// `max(v, floor)`; zero gradient below the floor.
    pub fn floor_at(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Floor { x, floor }, |v| v.max(floor))
    }

    /// Log-probabilities of a softmax over a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::shape("log_softmax", self.shape(x), &[]));
        }
        let d = self.data(x);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Tensor::vector(d.iter().map(|v| v - lse).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ_k weights[k] · x[idx[k]]`.
    pub fn sparse_dot(&mut self, x: Var, idx: &[usize], weights: &[f64]) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if idx.len() != weights.len() {
            return Err(Error::shape("sparse_dot", &[idx.len()], &[weights.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("sparse_dot", self.shape(x), &[bad]));
        }
        let d = self.data(x);
        let s = idx.iter().zip(weights).map(|(&i, w)| w * d[i]).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SparseDot {
                x,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("add_n of zero tensors".into()));
        };
        for &p in &parts[1..] {
            self.same_shape("add_n", first, p)?;
        }
        let mut data = self.data(first).to_vec();
        for &p in &parts[1..] {
            for (acc, v) in data.iter_mut().zip(self.data(p)) {
                *acc += v;
            }
        }
        let value = Tensor {
            shape: self.shape(first).to_vec(),
            data,
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::AddN(parts.to_vec()), rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        let Some(node) = self.nodes.get(root.0) else {
            return Err(Error::Contract(format!("root {root:?} is not on this tape")));
        };
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.consumed = true;

        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![1.0];

        for i in (0..=root.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.backward_node(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads, sizes })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| nodes[v.0].value.data();
        let size = |v: &Var| nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                self.matvec_backward(*w, *x, g, grads);
                if needs(b) {
                    accumulate(&mut grads[b.0], size(b), |s| {
                        s.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
                    });
                }
            }
            Op::MatVec { w, x } => self.matvec_backward(*w, *x, g, grads),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], size(v), |s| {
                            s.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], size(a), |s| {
                        s.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
                    });
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], size(b), |s| {
                        s.iter_mut().zip(g).for_each(|(a, gi)| *a -= gi)
                    });
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bv = val(b);
                    accumulate(&mut grads[a.0], size(a), |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * bv[k];
                        }
                    });
                }
                if needs(b) {
                    let av = val(a);
                    accumulate(&mut grads[b.0], size(b), |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * av[k];
                        }
                    });
                }
            }
            Op::Scale(x, c) => accumulate(&mut grads[x.0], size(x), |s| {
                s.iter_mut().zip(g).for_each(|(a, gi)| *a += c * gi)
            }),
            Op::AddScalar(x) => accumulate(&mut grads[x.0], size(x), |s| {
                s.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
            }),
            Op::MulConst(x, c) => accumulate(&mut grads[x.0], size(x), |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * c[k];
                }
            }),
            Op::Prelu { x, leak } => {
                let xv = val(x);
                let lv = val(leak);
                let nl = lv.len();
                let li = |k: usize| if nl == 1 { 0 } else { k };
                if needs(x) {
                    accumulate(&mut grads[x.0], size(x), |s| {
                        for k in 0..s.len() {
                            s[k] += if xv[k] >= 0.0 { g[k] } else { g[k] * lv[li(k)] };
                        }
                    });
                }
                if needs(leak) {
                    accumulate(&mut grads[leak.0], nl, |s| {
                        for k in 0..xv.len() {
                            if xv[k] < 0.0 {
                                s[li(k)] += g[k] * xv[k];
                            }
                        }
                    });
                }
            }
            Op::Softsign(x) => {
                let xv = val(x);
                accumulate(&mut grads[x.0], size(x), |s| {
                    for k in 0..s.len() {
                        let d = 1.0 + xv[k].abs();
                        s[k] += g[k] / (d * d);
                    }
                })
            }
            Op::Softplus(x) => {
                let xv = val(x);
                accumulate(&mut grads[x.0], size(x), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * sigmoid(xv[k]);
                    }
                })
            }
            Op::Exp(x) => accumulate(&mut grads[x.0], size(x), |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let xv = val(x);
                accumulate(&mut grads[x.0], size(x), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / xv[k];
                    }
                })
            }
            Op::Sqrt(x) => accumulate(&mut grads[x.0], size(x), |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * 0.5 / out[k];
                }
            }),
            Op::ClampExp { x, lo, hi } => {
                let xv = val(x);
                accumulate(&mut grads[x.0], size(x), |s| {
                    for k in 0..s.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            s[k] += g[k] * out[k];
                        }
                    }
                })
            }
            Op::Floor { x, floor } => {
                let xv = val(x);
                accumulate(&mut grads[x.0], size(x), |s| {
                    for k in 0..s.len() {
                        if xv[k] >= *floor {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let gsum: f64 = g.iter().sum();
                accumulate(&mut grads[x.0], size(x), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] - out[k].exp() * gsum;
                    }
                })
            }
            Op::Sum(x) => accumulate(&mut grads[x.0], size(x), |s| {
                s.iter_mut().for_each(|a| *a += g[0])
            }),
            Op::SparseDot { x, idx, weights } => accumulate(&mut grads[x.0], size(x), |s| {
                for (&k, w) in idx.iter().zip(weights) {
                    s[k] += g[0] * w;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = size(p);
                    if needs(p) {
                        accumulate(&mut grads[p.0], n, |s| {
                            s.iter_mut().zip(&g[off..off + n]).for_each(|(a, gi)| *a += gi)
                        });
                    }
                    off += n;
                }
            }
            Op::AddN(parts) => {
                for p in parts {
                    if needs(p) {
                        accumulate(&mut grads[p.0], size(p), |s| {
                            s.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
                        });
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let parts = op.backward(&ins, &node.value, g);
                debug_assert_eq!(parts.len(), inputs.len(), "{} backward arity", op.name());
                for (v, part) in inputs.iter().zip(parts) {
                    if needs(v) {
                        accumulate(&mut grads[v.0], size(v), |s| {
                            s.iter_mut().zip(&part).for_each(|(a, gi)| *a += gi)
                        });
                    }
                }
            }
        }
    }

    fn matvec_backward(&self, w: Var, x: Var, g: &[f64], grads: &mut [Vec<f64>]) {
        let m = self.shape(w)[1];
        let wv = self.data(w);
        let xv = self.data(x);
        if self.nodes[x.0].requires_grad {
            accumulate(&mut grads[x.0], m, |s| {
                for (row, gi) in wv.chunks_exact(m).zip(g) {
                    if *gi != 0.0 {
                        s.iter_mut().zip(row).for_each(|(a, r)| *a += gi * r);
                    }
                }
            });
        }
        if self.nodes[w.0].requires_grad {
            let nz: Vec<usize> = (0..m).filter(|&j| xv[j] != 0.0).collect();
            accumulate(&mut grads[w.0], wv.len(), |s| {
                for (row, gi) in s.chunks_exact_mut(m).zip(g) {
                    for &j in &nz {
                        row[j] += gi * xv[j];
                    }
                }
            });
        }
    }
}
