//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. Node order is a valid
//! topological order, so the backward pass is a single reverse sweep.

use super::conv::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    GlobalAvgPool(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        input: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed differentiable ops.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `v`'s value as a constant; cuts the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts_unchecked(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::from_parts_unchecked(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |p, q| p + q);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |p, q| p - q);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |p, q| p * q);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.map(a, |p| p * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, offset: T) -> Var {
        let value = self.map(a, |p| p + offset);
        let rg = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |p| if p > T::zero() { p } else { T::zero() });
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Batched 2-D cross-correlation. `input` is `[N,C,H,W]`, `kernel` is
    /// `[K,C,kh,kw]`, `bias` is `[K]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), self.shape(bias), stride, pad)?;
        let value = conv::forward(self.value(input), self.value(kernel), self.value(bias), &geom);
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `[N,C,H,W]` → `[N,C]`, mean over the spatial extent.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let &[n, c, h, w] = x.shape() else {
            return Err(shape_err!("global_avg_pool expects rank 4, got {:?}", x.shape()));
        };
        let hw = h * w;
        let data = x
            .data()
            .chunks_exact(hw)
            .map(|plane| T::of(plane.iter().map(|v| v.f64()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::from_parts_unchecked(vec![n, c], data);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), rg))
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(shape_err!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions differ: [{m},{k}] · [{k2},{n}]"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm_raw(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `[N,C] + [C]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (&[_, c], &[cb]) = (self.shape(x), self.shape(bias)) else {
            return Err(shape_err!(
                "add_bias expects [N,C] and [C], got {:?} and {:?}",
                self.shape(x),
                self.shape(bias)
            ));
        };
        if c != cb {
            return Err(shape_err!("add_bias: {c} columns but bias of length {cb}"));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Affine map `x · w + b` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(shape_err!("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for rank {}", base.len()));
        }
        let mut axis_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat on axis {axis}: {:?} incompatible with {:?}", s, base));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows of `input` (axis 0) picked by `index`; repeats allowed.
    pub fn index_select(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if index.is_empty() {
            return Err(shape_err!("index_select with empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(shape_err!("index_select: row {bad} out of range for {:?}", shape));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::IndexSelect {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(T::of(total)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let total: f64 = x.data().iter().map(|v| v.f64()).sum();
        let value = T::of(total / x.len() as f64);
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(value), Op::Mean(a), rg)
    }

    /// Per-row `−log softmax(logits)[target]`, shape `[N]`.
    pub fn cross_entropy_per_sample(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let &[n, c] = x.shape() else {
            return Err(shape_err!("cross entropy expects [N,C] logits, got {:?}", x.shape()));
        };
        if targets.len() != n {
            return Err(shape_err!("cross entropy: {n} rows but {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!("target class {bad} out of range [0, {c})")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut losses = Vec::with_capacity(n);
        for (row, &t) in x.data().chunks_exact(c).zip(targets) {
            let (p, loss) = stable_softmax_nll(row, t);
            probs.extend(p);
            losses.push(T::of(loss));
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![n], losses),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let per_sample = self.cross_entropy_per_sample(logits, targets)?;
        Ok(self.mean(per_sample))
    }

    /// Gradients of the single-element `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(Tensor::from_parts_unchecked(self.shape(loss).to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        if !self.node(v).requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.node(v).requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(self.value(v).zeros_like());
        }
        f(slot.as_mut().expect("slot was just filled"));
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let map_g = |f: &dyn Fn(usize, T) -> T| {
            Tensor::from_parts_unchecked(
                g.shape().to_vec(),
                g.data().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect(),
            )
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map_g(&|_, gv| -gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, map_g(&|i, gv| gv * bv[i]));
                self.accumulate(grads, *b, map_g(&|i, gv| gv * av[i]));
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, map_g(&|_, gv| gv * f));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, map_g(&|i, gv| if x[i] > T::zero() { gv } else { T::zero() }));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts_unchecked(shape, g.data().to_vec()));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_input = self.requires_grad(*input);
                let want_kernel = self.requires_grad(*kernel);
                let grads_out = conv::backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    geom,
                    want_input,
                    want_kernel,
                );
                if let Some(dx) = grads_out.input {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dk) = grads_out.kernel {
                    self.accumulate(grads, *kernel, dk);
                }
                self.accumulate(grads, *bias, grads_out.bias);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let hw = shape[2] * shape[3];
                let inv = T::of(1.0 / hw as f64);
                self.accumulate_with(grads, *a, |dst| {
                    for (plane, &gv) in dst.data_mut().chunks_exact_mut(hw).zip(g.data()) {
                        let share = gv * inv;
                        plane.iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    self.accumulate_with(grads, *a, |dst| {
                        T::gemm_raw(m, n, k, g.data(), (n, 1), self.value(*b).data(), (1, n), T::one(), dst.data_mut(), (k, 1));
                    });
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    self.accumulate_with(grads, *b, |dst| {
                        T::gemm_raw(k, m, n, self.value(*a).data(), (1, k), g.data(), (n, 1), T::one(), dst.data_mut(), (n, 1));
                    });
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let c = self.shape(*bias)[0];
                let mut db = vec![0.0f64; c];
                for row in g.data().chunks_exact(c) {
                    for (acc, &gv) in db.iter_mut().zip(row) {
                        *acc += gv.f64();
                    }
                }
                let db = db.into_iter().map(T::of).collect();
                self.accumulate(grads, *bias, Tensor::from_parts_unchecked(vec![c], db));
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let out_chunk = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * out_chunk + offset;
                            part.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts_unchecked(self.shape(v).to_vec(), part));
                    }
                    offset += chunk;
                }
            }
            Op::IndexSelect { input, index } => {
                let row: usize = self.shape(*input)[1..].iter().product();
                self.accumulate_with(grads, *input, |dst| {
                    let d = dst.data_mut();
                    for (k, &i) in index.iter().enumerate() {
                        for (t, &gv) in d[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                            *t += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let shape = self.shape(*a).to_vec();
                let numel = self.value(*a).len();
                self.accumulate(grads, *a, Tensor::from_parts_unchecked(shape, vec![gv; numel]));
            }
            Op::Mean(a) => {
                let numel = self.value(*a).len();
                let gv = T::of(g.data()[0].f64() / numel as f64);
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts_unchecked(shape, vec![gv; numel]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (r, (row, &t)) in d.chunks_exact_mut(c).zip(targets).enumerate() {
                    row[t] -= T::one();
                    let gv = g.data()[r];
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                self.accumulate(grads, *logits, Tensor::from_parts_unchecked(self.shape(*logits).to_vec(), d));
            }
        }
    }
}

/// Softmax probabilities and `−log p[target]` for one row, via max subtraction
/// with f64 accumulation.
pub(crate) fn stable_softmax_nll<T: Scalar>(row: &[T], target: usize) -> (Vec<T>, f64) {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln() + max;
    let probs = exps.iter().map(|e| T::of(e / z)).collect();
    (probs, log_z - row[target].f64())
}

/// Output of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros shaped like `value` when `v` is off the path.
    pub fn take_or_zeros(&mut self, v: Var, value: &Tensor<T>) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| value.zeros_like())
    }

    /// Number of non-leaf ops replayed by the backward pass.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }
}
