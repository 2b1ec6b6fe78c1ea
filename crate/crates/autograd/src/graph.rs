use std::collections::HashMap;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::params::{Gradients, ParamSet};
use crate::{gemm, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param { set: u64, index: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Reshape(Var),
    CosineRows { a: Var, b: Var, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations. Nodes are appended in evaluation order, so reverse
/// index order is a valid topological order for backpropagation.
///
/// Shape errors inside graph operations are programming errors and panic;
/// callers validate user-facing inputs before building the graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, usize, bool), Var>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param { .. } => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    /// Bind a trainable parameter. Repeated binds of the same entry return
    /// the same node, so gradients from every use accumulate.
    pub fn param(&mut self, set: &ParamSet<T>, index: usize) -> Var {
        self.bind(set, index, true)
    }

    /// Bind a parameter as a constant: gradients flow through it to other
    /// inputs but never into the parameter itself.
    pub fn frozen(&mut self, set: &ParamSet<T>, index: usize) -> Var {
        self.bind(set, index, false)
    }

    fn bind(&mut self, set: &ParamSet<T>, index: usize, trainable: bool) -> Var {
        let key = (set.id(), index, trainable);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let value = set.get(index).clone();
        let op = if trainable { Op::Param { set: set.id(), index } } else { Op::Leaf };
        let v = self.push(value, op, &[]);
        self.bound.insert(key, v);
        v
    }

    /// `x[B, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        assert_eq!(xs.len(), 2, "linear expects a 2-D input, got {xs:?}");
        assert_eq!(ws.len(), 2);
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], fan_in, "linear: input width {fan_in} vs weight {ws:?}");
        assert_eq!(bs, [fan_out]);
        let mut y = vec![T::zero(); batch * fan_out];
        for row in y.chunks_mut(fan_out) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            false,
            true,
            batch,
            fan_out,
            fan_in,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut y,
        );
        let value = Tensor::new(&[batch, fan_out], y).unwrap();
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Valid convolution with square kernels: `x[B,C,H,W]`, `w[O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d expects [B,C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
        };
        assert!(geom.out_height() > 0 && geom.out_width() > 0, "conv2d input smaller than kernel");
        let y = conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(&[geom.batch, geom.out_channels, geom.out_height(), geom.out_width()], y).unwrap();
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Layer normalization over the last axis of a 2-D input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let (rows, d) = (xs[0], xs[1]);
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(&[rows, d], y).unwrap();
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data).unwrap();
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b))
    }

    /// `[B, D] → [B, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let data = self.value(x).data().chunks(xs[1]).map(|r| r.iter().copied().sum()).collect();
        let value = Tensor::new(&[xs[0], 1], data).unwrap();
        self.push(value, Op::SumRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(!v.is_empty(), "mean of empty tensor");
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Concatenate 2-D inputs along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), 2, "concat expects 2-D inputs");
                assert_eq!(s[0], rows, "concat row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[rows, total], data).unwrap();
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of a 2-D input.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        assert!(start + len <= xs[1], "narrow out of range");
        let data = self.value(x).data().chunks(xs[1]).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let value = Tensor::new(&[xs[0], len], data).unwrap();
        self.push(value, Op::Narrow { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Row-wise cosine similarity `⟨a,b⟩ / (‖a‖‖b‖ + eps)`, `[B, D] → [B, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(av.shape().len(), 2);
        let (rows, d) = (av.dim(0), av.dim(1));
        let eps = T::lit(eps);
        let data = (0..rows)
            .map(|r| {
                let (x, y) = (&av.data()[r * d..(r + 1) * d], &bv.data()[r * d..(r + 1) * d]);
                let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                let ny = y.iter().map(|&q| q * q).sum::<T>().sqrt();
                dot / (nx * ny + eps)
            })
            .collect();
        let value = Tensor::new(&[rows, 1], data).unwrap();
        self.push(value, Op::CosineRows { a, b, eps }, &[a, b])
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let y = &node.value;
        let elementwise = |x: Var, f: &dyn Fn(usize, T) -> T| -> Tensor<T> {
            let data = g.data().iter().enumerate().map(|(k, &gv)| f(k, gv)).collect();
            Tensor::new(self.value(x).shape(), data).unwrap()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param { set, index } => match out.by_param.get_mut(&(*set, *index)) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.by_param.insert((*set, *index), g);
                }
            },
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, fan_in, fan_out) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    gemm(false, false, batch, fan_in, fan_out, T::one(), g.data(), wv.data(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(&[batch, fan_in], dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    gemm(true, false, fan_out, fan_in, batch, T::one(), g.data(), xv.data(), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(&[fan_out, fan_in], dw).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.data().chunks(fan_out) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[fan_out], db).unwrap());
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.wants(*x);
                if need_dx || self.wants(*w) || self.wants(*b) {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom, need_dx);
                    if let Some(dx) = dx {
                        self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx).unwrap());
                    }
                    if self.wants(*w) {
                        self.accumulate(grads, *w, Tensor::new(self.value(*w).shape(), dw).unwrap());
                    }
                    if self.wants(*b) {
                        self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db).unwrap());
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, d) = (y.dim(0), y.dim(1));
                let gv = self.value(*gamma).data();
                let gd = g.data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[d], dg).unwrap());
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::new(&[d], db).unwrap());
                }
                if self.wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] / dn * (dn * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[rows, d], dx).unwrap());
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let yd = y.data();
                    let t = elementwise(*x, &|k, gv| if yd[k] > T::zero() { gv } else { T::zero() });
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let yd = y.data();
                    let t = elementwise(*x, &|k, gv| gv * (T::one() - yd[k] * yd[k]));
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let yd = y.data();
                    let t = elementwise(*x, &|k, gv| gv * yd[k]);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let t = elementwise(*x, &|k, gv| gv / xd[k]);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Softplus(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let t = elementwise(*x, &|k, gv| gv * sigmoid(xd[k]));
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Square(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let two = T::lit(2.0);
                    let t = elementwise(*x, &|k, gv| gv * two * xd[k]);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let t = elementwise(*a, &|k, gv| gv * bd[k]);
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let t = elementwise(*b, &|k, gv| gv * ad[k]);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Min(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let t = elementwise(*a, &|k, gv| if bd[k] < ad[k] { T::zero() } else { gv });
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let t = elementwise(*b, &|k, gv| if bd[k] < ad[k] { gv } else { T::zero() });
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let c = *c;
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    let t = Tensor::new(self.value(*x).shape(), g.into_data()).unwrap();
                    self.accumulate(grads, *x, t);
                }
            }
            Op::SumRows(x) => {
                if self.wants(*x) {
                    let d = self.value(*x).dim(1);
                    let gd = g.data();
                    let t = Tensor::from_fn(self.value(*x).shape(), |k| gd[k / d]);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = T::from_usize(self.value(*x).len()).unwrap();
                    self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.item() / n));
                }
            }
            Op::Concat(parts) => {
                let total = y.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dim(1);
                    if self.wants(p) {
                        let data = g.data().chunks(total).flat_map(|r| r[offset..offset + w].iter().copied()).collect();
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape(), data).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Narrow { x, start } => {
                if self.wants(*x) {
                    let (rows, width) = (self.value(*x).dim(0), self.value(*x).dim(1));
                    let len = y.dim(1);
                    let mut dx = vec![T::zero(); rows * width];
                    for r in 0..rows {
                        dx[r * width + start..r * width + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, *x, Tensor::new(&[rows, width], dx).unwrap());
                }
            }
            Op::CosineRows { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (rows, d) = (av.dim(0), av.dim(1));
                let mut da = vec![T::zero(); rows * d];
                let mut db = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let (x, z) = (&av.data()[r * d..(r + 1) * d], &bv.data()[r * d..(r + 1) * d]);
                    let dot: T = x.iter().zip(z).map(|(&p, &q)| p * q).sum();
                    let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                    let nz = z.iter().map(|&q| q * q).sum::<T>().sqrt();
                    let den = nx * nz + *eps;
                    let gr = g.data()[r];
                    // d/dx [dot / (|x||z| + eps)] = z/den − dot·|z|·x/(|x|·den²)
                    let cx = if nx > T::zero() { dot * nz / (nx * den * den) } else { T::zero() };
                    let cz = if nz > T::zero() { dot * nx / (nz * den * den) } else { T::zero() };
                    for j in 0..d {
                        da[r * d + j] = gr * (z[j] / den - cx * x[j]);
                        db[r * d + j] = gr * (x[j] / den - cz * z[j]);
                    }
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, Tensor::new(&[rows, d], da).unwrap());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, Tensor::new(&[rows, d], db).unwrap());
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
