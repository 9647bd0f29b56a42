//! Reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value.
//! `backward` walks the nodes in reverse insertion order, which is a valid
//! topological order because a node can only reference earlier nodes.

use crate::conv::{conv2d_backward, conv2d_forward, Conv2dSpec};
use crate::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-norm forward pass in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Relu(Var),
    Tanh(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the leaves that needed them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient (a trainable parameter or probed input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation; also the way to detach a value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        self.push(value, Op::Conv2d { x, w, b, spec }, g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let g = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), g)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let m = h * w;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (plane, dst) in xv.data().chunks(m).zip(out.chunks_mut(m)) {
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (d, v) in dst.iter_mut().zip(plane) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(vec![n, c, h, w], out);
        let g = self.any_grad(&[x]);
        self.push(value, Op::InstanceNorm { x, inv_std }, g)
    }

    /// Batch normalization with batch statistics; returns the statistics so
    /// the caller can update running buffers.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                mean[ch] += xv.data()[off..off + hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                var[ch] += xv.data()[off..off + hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (xhat, value) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let g = self.any_grad(&[x, gamma, beta]);
        let out = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        );
        (out, BatchStats { mean, var: unbiased })
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Var {
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (xhat, value) = self.affine_normalize(x, gamma, beta, running_mean, &inv_std);
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        )
    }

    fn affine_normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), c, "batch-norm gamma has wrong channel count");
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let z = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let shape = vec![n, c, h, w];
        (Tensor::new(shape.clone(), xhat), Tensor::new(shape, out))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2x(x), g)
    }

    /// Non-overlapping 2x2 average pooling. Spatial sizes must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let value = avg_pool2x(self.value(x));
        let g = self.any_grad(&[x]);
        self.push(value, Op::AvgPool2x(x), g)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4();
            assert_eq!(
                (pn, ph, pw),
                (n, h, w),
                "concat of mismatched tensors {:?} vs {:?}",
                self.value(*p).shape(),
                self.value(parts[0]).shape()
            );
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for p in parts {
                let pv = self.value(*p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let g = self.any_grad(parts);
        self.push(Tensor::new(vec![n, total_c, h, w], out), Op::Concat(parts.to_vec()), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), g)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x).map(|v| v + offset);
        let g = self.any_grad(&[x]);
        self.push(value, Op::AddScalar(x), g)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Square(x), g)
    }

    /// Absolute value; the sub-gradient at exactly zero is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Abs(x), g)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), g)
    }

    /// Sign pattern at every non-smooth point (ReLU and abs inputs).
    ///
    /// Two evaluations with equal patterns lie in the same smooth piece of
    /// the function, which is what finite-difference checks need.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => pattern.extend(self.value(x).data().iter().map(|v| *v > 0.0)),
                Op::Abs(x) => pattern.extend(self.value(x).data().iter().map(|v| *v >= 0.0)),
                _ => {}
            }
        }
        pattern
    }

    /// Differentiate the scalar `root` with respect to every leaf that needs it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward needs a scalar root, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &grad, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(grad);
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let out = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *spec,
                    grad,
                    (wants(*x), wants(*w), b.is_some_and(wants)),
                );
                if let Some(d) = out.input {
                    add_into(&mut grads[x.0], d);
                }
                if let Some(d) = out.weight {
                    add_into(&mut grads[w.0], d);
                }
                if let (Some(b), Some(d)) = (b, out.bias) {
                    add_into(&mut grads[b.0], d);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let d = zip(xv, grad, |v, g| if v > 0.0 { g } else { 0.0 });
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let d = zip(&node.value, grad, |y, g| g * (1.0 - y * y));
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if wants(*x) {
                    let y = &node.value;
                    let (_, _, h, w) = y.dims4();
                    let m = h * w;
                    let mut dx = vec![0.0; y.len()];
                    for (p, ((yp, gp), dp)) in y
                        .data()
                        .chunks(m)
                        .zip(grad.data().chunks(m))
                        .zip(dx.chunks_mut(m))
                        .enumerate()
                    {
                        norm_backward(yp, gp, dp, inv_std[p]);
                    }
                    add_into(&mut grads[x.0], Tensor::new(y.shape().to_vec(), dx));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.dims4();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let (dgamma, dbeta) = affine_param_grads(xhat, grad);
                if wants(*x) {
                    let count = (n * hw) as f64;
                    let mut dx = vec![0.0; xhat.len()];
                    for ch in 0..c {
                        // dxhat = g * gamma; dx = inv/M (M dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for i in off..off + hw {
                                let d = grad.data()[i] * gv[ch];
                                s1 += d;
                                s2 += d * xhat.data()[i];
                            }
                        }
                        let k = inv_std[ch] / count;
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for i in off..off + hw {
                                let d = grad.data()[i] * gv[ch];
                                dx[i] = k * (count * d - s1 - xhat.data()[i] * s2);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(xhat.shape().to_vec(), dx));
                }
                if wants(*gamma) {
                    add_into(&mut grads[gamma.0], Tensor::new(vec![c], dgamma));
                }
                if wants(*beta) {
                    add_into(&mut grads[beta.0], Tensor::new(vec![c], dbeta));
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c, h, w) = xhat.dims4();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let (dgamma, dbeta) = affine_param_grads(xhat, grad);
                if wants(*x) {
                    let mut dx = grad.clone();
                    for (p, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        let ch = p % c;
                        chunk.iter_mut().for_each(|d| *d *= gv[ch] * inv_std[ch]);
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if wants(*gamma) {
                    add_into(&mut grads[gamma.0], Tensor::new(vec![c], dgamma));
                }
                if wants(*beta) {
                    add_into(&mut grads[beta.0], Tensor::new(vec![c], dbeta));
                }
            }
            Op::Upsample2x(x) => {
                if wants(*x) {
                    let (n, c, h2, w2) = grad.dims4();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut dx = vec![0.0; n * c * h * w];
                    for (src, dst) in grad.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(vec![n, c, h, w], dx));
                }
            }
            Op::AvgPool2x(x) => {
                if wants(*x) {
                    let (n, c, h, w) = grad.dims4();
                    let (h2, w2) = (2 * h, 2 * w);
                    let mut dx = vec![0.0; n * c * h2 * w2];
                    for (src, dst) in grad.data().chunks(h * w).zip(dx.chunks_mut(h2 * w2)) {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dst[i * w2 + j] = 0.25 * src[(i / 2) * w + j / 2];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(vec![n, c, h2, w2], dx));
                }
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = grad.dims4();
                let hw = h * w;
                let mut c_off = 0;
                for p in parts {
                    let pc = self.value(*p).shape()[1];
                    if wants(*p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let base = (s * total_c + c_off) * hw;
                            d.extend_from_slice(&grad.data()[base..base + pc * hw]);
                        }
                        add_into(&mut grads[p.0], Tensor::new(vec![n, pc, h, w], d));
                    }
                    c_off += pc;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], grad.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], grad.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], grad.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], grad.map(|g| -g));
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], grad.map(|g| g * f));
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], grad.clone());
                }
            }
            Op::Square(x) => {
                if wants(*x) {
                    let d = zip(self.value(*x), grad, |v, g| 2.0 * v * g);
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Abs(x) => {
                if wants(*x) {
                    let d = zip(self.value(*x), grad, |v, g| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let g = grad.item() / xv.len() as f64;
                    add_into(&mut grads[x.0], Tensor::full(xv.shape().to_vec(), g));
                }
            }
        }
    }
}

fn norm_backward(y: &[f64], g: &[f64], dx: &mut [f64], inv_std: f64) {
    let m = y.len() as f64;
    let s1: f64 = g.iter().sum();
    let s2: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
    let k = inv_std / m;
    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
        *d = k * (m * gi - s1 - yi * s2);
    }
}

fn affine_param_grads(xhat: &Tensor, grad: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = xhat.dims4();
    let hw = h * w;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += grad.data()[i] * xhat.data()[i];
                dbeta[ch] += grad.data()[i];
            }
        }
    }
    (dgamma, dbeta)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

/// Non-overlapping 2x2 mean over the spatial axes of an NCHW tensor.
pub fn avg_pool2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "2x2 pooling needs even spatial size, got {h}x{w}"
    );
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = 0.25 * (a + b + c + d);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}
