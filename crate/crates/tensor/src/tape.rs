//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value plus whatever the
//! backward pass needs. Nodes are created in evaluation order, so walking the
//! tape backwards is a valid topological traversal.

use indexmap::IndexMap;
use rand::Rng;

use crate::element::{matmul, Element};
use crate::error::{config, Error, Result};
use crate::kernels::{self, ConvGeom, KERNEL};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Variance clamp for batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    Dense { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<T> },
    LeakyRelu { x: Var, alpha: T },
    Relu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    Reshape { x: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    Column { x: Var, col: usize },
    Gather { x: Var, index: Vec<usize> },
    Affine { x: Var, scale: T },
    LnClamped { x: Var },
    Pow { x: Var, exponent: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    MeanRows { x: Var },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    consumed: bool,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: IndexMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient (data, labels, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An anonymous leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ---- layers -------------------------------------------------------

    /// 3x3 convolution, NHWC input, kernel `(3, 3, in_c, out_c)`, "same" padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x).to_vec(), self.shape(kernel).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 4 {
            return config(format!("conv2d input must be rank 4, got {xs:?}"));
        }
        check_kernel(&ks, &bs)?;
        if ks[2] != xs[3] {
            return config(format!("conv2d kernel expects {} input channels, input has {}", ks[2], xs[3]));
        }
        let geom = ConvGeom::same(xs[0], xs[1], xs[2], xs[3], ks[3], stride)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), self.value(bias).data(), &geom);
        let value = Tensor::new(&[geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?;
        let needs = self.needs(&[x, kernel, bias]);
        Ok(self.push(value, Op::Conv2d { x, k: kernel, b: bias, geom }, needs))
    }

    /// Transposed 3x3 convolution; output spatial size is input size times
    /// `stride`. Kernel is `(3, 3, out_c, in_c)` so that this op is exactly
    /// the adjoint of [`Tape::conv2d`] with the same kernel.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x).to_vec(), self.shape(kernel).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 4 {
            return config(format!("conv_transpose2d input must be rank 4, got {xs:?}"));
        }
        if ks.len() != 4 || ks[0] != KERNEL || ks[1] != KERNEL || bs != [ks[2]] {
            return config(format!("bad transposed kernel {ks:?} / bias {bs:?}"));
        }
        if ks[3] != xs[3] {
            return config(format!("transposed kernel expects {} input channels, input has {}", ks[3], xs[3]));
        }
        if stride != 1 && stride != 2 {
            return config(format!("stride must be 1 or 2, got {stride}"));
        }
        let geom = ConvGeom::same(xs[0], xs[1] * stride, xs[2] * stride, ks[2], ks[3], stride)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (xs[1], xs[2]));
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(kernel).data(), self.value(bias).data(), &geom);
        let value = Tensor::new(&[geom.batch, geom.in_h, geom.in_w, geom.in_c], out)?;
        let needs = self.needs(&[x, kernel, bias]);
        Ok(self.push(value, Op::ConvTranspose2d { x, k: kernel, b: bias, geom }, needs))
    }

    /// `x W + b` for `x: (N, in)`, `W: (in, out)`, `b: (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return config(format!("dense: input {xs:?}, weight {ws:?}, bias {bs:?}"));
        }
        let mut out = vec![T::zero(); xs[0] * ws[1]];
        matmul(self.value(x).data(), xs[0], xs[1], false, self.value(w).data(), ws[0], ws[1], false, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(ws[1]) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(&[xs[0], ws[1]], out)?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, needs))
    }

    /// Channel-wise batch norm over every axis but the last.
    ///
    /// `Train` normalizes by batch statistics and returns them so the caller
    /// can fold them into running estimates; `Infer` uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return config(format!("batch_norm affine params must have shape [{c}]"));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(x).data(), c);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            Mode::Infer => {
                let (rm, rv) = running.ok_or_else(|| Error::Usage("infer-mode batch_norm needs running stats".into()))?;
                if rm.len() != c || rv.len() != c {
                    return config("running stats width mismatch");
                }
                (rm.iter().map(|v| v.as_f64()).collect(), rv.iter().map(|v| v.as_f64()).collect(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean_t[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(&[x, gamma, beta]);
        let batch_stats = mode == Mode::Train;
        Ok((self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, needs), stats))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that
    /// inference is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return config(format!("dropout rate {rate} outside [0, 1)"));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let out: Vec<T> = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::from_f64(alpha);
        let value = self.value(x).map(|v| if v >= T::zero() { v } else { a * v });
        let needs = self.needs(&[x]);
        self.push(value, Op::LeakyRelu { x, alpha: a }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(&[x]);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.needs(&[x]);
        self.push(value, Op::Tanh { x }, needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.last_dim();
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks_exact(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).as_f64().exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| T::from_f64(e / total)));
        }
        let value = Tensor::new(src.shape(), out).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::Softmax { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[lead, rest])
    }

    // ---- structural ---------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, needs))
    }

    /// Column `col` of an `(N, C)` tensor as an `(N)` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || col >= src.shape()[1] {
            return config(format!("column {col} of {:?}", src.shape()));
        }
        let c = src.shape()[1];
        let out: Vec<T> = src.data().chunks_exact(c).map(|r| r[col]).collect();
        let value = Tensor::new(&[out.len()], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Column { x, col }, needs))
    }

    /// Per-row pick `x[i, index[i]]` from an `(N, C)` tensor.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || src.shape()[0] != index.len() {
            return config(format!("gather of {} indices from {:?}", index.len(), src.shape()));
        }
        let c = src.shape()[1];
        if let Some(bad) = index.iter().find(|&&i| i >= c) {
            return config(format!("gather index {bad} out of range for width {c}"));
        }
        let out: Vec<T> = src.data().chunks_exact(c).zip(index).map(|(r, &i)| r[i]).collect();
        let value = Tensor::new(&[out.len()], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, index: index.to_vec() }, needs))
    }

    // ---- elementwise --------------------------------------------------

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        let needs = self.needs(&[x]);
        self.push(value, Op::Affine { x, scale: s }, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `ln(max(x, 1e-12))`; the gradient is zero where the floor is active.
    pub fn ln(&mut self, x: Var) -> Var {
        let floor = T::from_f64(LOG_FLOOR);
        let value = self.value(x).map(|v| v.max(floor).ln());
        let needs = self.needs(&[x]);
        self.push(value, Op::LnClamped { x }, needs)
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        let e = T::from_f64(exponent);
        let value = self.value(x).map(|v| if exponent == 0.0 { T::one() } else { v.powf(e) });
        let needs = self.needs(&[x]);
        self.push(value, Op::Pow { x, exponent: e }, needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return config(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b }, "div")
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let total: f64 = src.data().iter().map(|v| v.as_f64()).sum();
        let mean = total / src.len() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(T::from_f64(mean)), Op::Mean { x }, needs)
    }

    /// Mean over the leading axis of an `(N, F)` tensor, giving `(F)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 {
            return config(format!("mean_rows needs rank 2, got {:?}", src.shape()));
        }
        let (n, f) = (src.shape()[0], src.shape()[1]);
        let sums = kernels::column_sums(src.data(), f);
        let out: Vec<T> = sums.into_iter().map(|s| s / T::from_f64(n as f64)).collect();
        let value = Tensor::new(&[f], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::MeanRows { x }, needs))
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagate from a scalar `loss`.
    ///
    /// A tape supports exactly one backward traversal.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads, params: self.params.clone(), shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let gd = g.data();
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v), data);
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                let need_x = self.nodes[x.0].needs_grad;
                let (dx, dk, db) = kernels::conv2d_backward(val(*x).data(), val(*k).data(), gd, geom, need_x);
                if let Some(dx) = dx {
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*k, like(*k, dk)?));
                out.push((*b, like(*b, db)?));
            }
            Op::ConvTranspose2d { x, k, b, geom } => {
                let need_x = self.nodes[x.0].needs_grad;
                let (dx, dk, db) = kernels::conv_transpose2d_backward(val(*x).data(), val(*k).data(), gd, geom, need_x);
                if let Some(dx) = dx {
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*k, like(*k, dk)?));
                out.push((*b, like(*b, db)?));
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, i, o) = (xs[0], xs[1], ws[1]);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); n * i];
                    matmul(gd, n, o, false, val(*w).data(), i, o, true, &mut dx, false);
                    out.push((*x, like(*x, dx)?));
                }
                let mut dw = vec![T::zero(); i * o];
                matmul(val(*x).data(), n, i, true, gd, n, o, false, &mut dw, false);
                out.push((*w, like(*w, dw)?));
                out.push((*b, like(*b, kernels::column_sums(gd, o))?));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dbeta[j] += grow[j].as_f64();
                        dgamma[j] += (grow[j] * hrow[j]).as_f64();
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = Vec::with_capacity(xhat.len());
                    if *batch_stats {
                        // dx = gamma * inv_std / M * (M dy - sum dy - xhat * sum(dy xhat))
                        let m = rows as f64;
                        for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let coef = gam[j].as_f64() * inv_std[j].as_f64() / m;
                                let v = coef * (m * grow[j].as_f64() - dbeta[j] - hrow[j].as_f64() * dgamma[j]);
                                dx.push(T::from_f64(v));
                            }
                        }
                    } else {
                        for grow in gd.chunks_exact(c) {
                            for j in 0..c {
                                dx.push(grow[j] * gam[j] * inv_std[j]);
                            }
                        }
                    }
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*gamma, like(*gamma, dgamma.into_iter().map(T::from_f64).collect())?));
                out.push((*beta, like(*beta, dbeta.into_iter().map(T::from_f64).collect())?));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, like(*x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect())?));
            }
            Op::LeakyRelu { x, alpha } => {
                let d = gd.iter().zip(val(*x).data()).map(|(&g, &v)| if v >= T::zero() { g } else { g * *alpha }).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Relu { x } => {
                let d = gd.iter().zip(val(*x).data()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Tanh { x } => {
                let d = gd.iter().zip(node.value.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Softmax { x } => {
                let c = node.value.last_dim();
                let mut d = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks_exact(c).zip(node.value.data().chunks_exact(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&g, &y)| (g * y).as_f64()).sum();
                    let dot = T::from_f64(dot);
                    d.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Reshape { x } => out.push((*x, like(*x, gd.to_vec())?)),
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    out.push((*p, like(*p, gd[offset..offset + n].to_vec())?));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let stride = src.len() / src.shape()[0];
                let mut d = vec![T::zero(); src.len()];
                d[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                out.push((*x, like(*x, d)?));
            }
            Op::Column { x, col } => {
                let c = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (i, &g) in gd.iter().enumerate() {
                    d[i * c + col] = g;
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Gather { x, index } => {
                let c = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (i, (&g, &j)) in gd.iter().zip(index).enumerate() {
                    d[i * c + j] = g;
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Affine { x, scale } => out.push((*x, like(*x, gd.iter().map(|&g| g * *scale).collect())?)),
            Op::LnClamped { x } => {
                let floor = T::from_f64(LOG_FLOOR);
                let d = gd.iter().zip(val(*x).data()).map(|(&g, &v)| if v > floor { g / v } else { T::zero() }).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Pow { x, exponent } => {
                let e = *exponent;
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| if e == T::zero() { T::zero() } else { g * e * v.powf(e - T::one()) })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                out.push((*a, like(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect())?));
                out.push((*b, like(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect())?));
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                out.push((*a, like(*a, gd.iter().zip(bv).map(|(&g, &y)| g / y).collect())?));
                let db = gd.iter().zip(av).zip(bv).map(|((&g, &x), &y)| -g * x / (y * y)).collect();
                out.push((*b, like(*b, db)?));
            }
            Op::Sum { x } => out.push((*x, Tensor::full(self.shape(*x), gd[0]))),
            Op::Mean { x } => {
                let n = T::from_f64(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), gd[0] / n)));
            }
            Op::MeanRows { x } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = T::one() / T::from_f64(n as f64);
                let mut d = Vec::with_capacity(n * f);
                for _ in 0..n {
                    d.extend(gd.iter().map(|&g| g * inv));
                }
                out.push((*x, like(*x, d)?));
            }
        }
        Ok(out)
    }
}

fn check_kernel(ks: &[usize], bs: &[usize]) -> Result<()> {
    if ks.len() != 4 || ks[0] != KERNEL || ks[1] != KERNEL {
        return config(format!("kernel must be (3, 3, in, out), got {ks:?}"));
    }
    if bs != [ks[3]] {
        return config(format!("bias {bs:?} does not match kernel {ks:?}"));
    }
    Ok(())
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients for every named parameter, in registration order.
    /// Unreachable parameters get zeros.
    pub fn named(&self) -> IndexMap<String, Tensor<T>> {
        self.params.iter().map(|(name, &v)| (name.clone(), self.get_or_zero(v))).collect()
    }
}
