//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! Forward calls append [`OpNode`]s to a [`Tape`]; `backward` walks the nodes
//! in reverse and accumulates gradients into per-node buffers. The op set is
//! exactly what the network and the gradient-based attribution baselines
//! need — this is not a general-purpose autodiff.

use crate::error::{Error, Result};
use crate::ops::conv::{Pad3, PadMode, Stride3};
use crate::ops::nn::BnCache;
use crate::ops::{conv, nn, pool};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// What produced a node's value. Saved inputs/caches make the backward pass
/// deterministic and allow bit-exact forward replay from the leaves.
enum Op<T: Scalar> {
    Leaf,
    Conv3d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: Stride3, pad: Pad3, mode: PadMode },
    Linear { x: NodeId, w: NodeId, bias: Option<NodeId> },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache<T> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, var: Vec<T>, eps: T },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    AvgPool { x: NodeId, k: usize, stride: usize },
    Concat { xs: Vec<NodeId> },
    Mul { a: NodeId, b: NodeId },
    ScaleVec { s: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Pick { x: NodeId, index: usize },
    /// weight * (softplus(z) - y*z): binary cross-entropy on a logit.
    BceLogit { z: NodeId, y: T, weight: T },
    ShiftedRelu { x: NodeId, scale: Vec<T>, shift: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph. Nodes are appended in forward order, so the
/// reverse scan of `backward` visits every node after all of its consumers.
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
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: Stride3,
        pad: Pad3,
        mode: PadMode,
    ) -> Result<NodeId> {
        let b = bias.map(|b| self.nodes[b.0].value.data().to_vec());
        let y = conv::conv3d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.as_deref(),
            stride,
            pad,
            mode,
        )?;
        let mut ids = vec![x, w];
        ids.extend(bias);
        let needs = self.any_needs(&ids);
        Ok(self.push(y, Op::Conv3d { x, w, bias, stride, pad, mode }, needs))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let b = bias.map(|b| self.nodes[b.0].value.data().to_vec());
        let y = nn::linear(&self.nodes[w.0].value, &self.nodes[x.0].value, b.as_deref())?;
        let mut ids = vec![x, w];
        ids.extend(bias);
        let needs = self.any_needs(&ids);
        Ok(self.push(y, Op::Linear { x, w, bias }, needs))
    }

    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let (y, cache) = nn::batchnorm_train(
            &self.nodes[x.0].value,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        )?;
        let needs = self.any_needs(&[x, gamma, beta]);
        Ok(self.push(y, Op::BatchNormTrain { x, gamma, beta, cache }, needs))
    }

    /// Frozen-statistics batch norm; gradients flow to x, gamma and beta.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> Result<NodeId> {
        let y = nn::batchnorm_eval(
            &self.nodes[x.0].value,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            &mean,
            &var,
            eps,
        )?;
        let needs = self.any_needs(&[x, gamma, beta]);
        Ok(self.push(y, Op::BatchNormEval { x, gamma, beta, mean, var, eps }, needs))
    }

    /// Batch statistics recorded by a training-mode batch norm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { cache, .. } => Some((&cache.mean, &cache.var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = nn::relu(&self.nodes[x.0].value);
        let needs = self.nodes[x.0].needs_grad;
        self.push(y, Op::Relu { x }, needs)
    }

    pub fn shifted_relu(&mut self, x: NodeId, scale: Vec<T>, shift: Vec<T>) -> NodeId {
        let y = nn::shifted_relu(&self.nodes[x.0].value, &scale, &shift);
        let needs = self.nodes[x.0].needs_grad;
        self.push(y, Op::ShiftedRelu { x, scale, shift }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = nn::tanh_t(&self.nodes[x.0].value);
        let needs = self.nodes[x.0].needs_grad;
        self.push(y, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = nn::sigmoid(&self.nodes[x.0].value);
        let needs = self.nodes[x.0].needs_grad;
        self.push(y, Op::Sigmoid { x }, needs)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = nn::softmax(self.nodes[x.0].value.data());
        let shape = self.nodes[x.0].value.shape().to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(shape, y).expect("softmax preserves length"), Op::Softmax { x }, needs)
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (y, argmax) = pool::maxpool3d(&self.nodes[x.0].value, k, stride, pad)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(y, Op::MaxPool { x, argmax }, needs))
    }

    pub fn avgpool(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let y = pool::avgpool3d(&self.nodes[x.0].value, k, stride)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(y, Op::AvgPool { x, k, stride }, needs))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|id| &self.nodes[id.0].value).collect();
        let y = nn::concat_channels(&parts)?;
        let needs = self.any_needs(xs);
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, needs))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let y = Tensor::from_fn(ta.shape().to_vec(), |i| ta.data()[i] * tb.data()[i]);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, needs))
    }

    /// Scalar node times vector node.
    pub fn scale_vec(&mut self, s: NodeId, v: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::shape("scale_vec", "scale operand must be scalar"));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let y = self.nodes[v.0].value.map(|x| x * sv);
        let needs = self.any_needs(&[s, v]);
        Ok(self.push(y, Op::ScaleVec { s, v }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let y = Tensor::from_fn(ta.shape().to_vec(), |i| ta.data()[i] + tb.data()[i]);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, needs))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// Extract one coordinate as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.nodes[x.0].value.data().get(index).copied().ok_or_else(|| {
            Error::shape("pick", format!("index {} out of {}", index, self.nodes[x.0].value.len()))
        })?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, needs))
    }

    /// Numerically stable weighted BCE on a scalar logit node.
    pub fn bce_logit(&mut self, z: NodeId, label: bool, weight: T) -> Result<NodeId> {
        if self.nodes[z.0].value.len() != 1 {
            return Err(Error::shape("bce_logit", "logit must be scalar"));
        }
        let zv = self.nodes[z.0].value.data()[0];
        let y = if label { T::one() } else { T::zero() };
        // softplus(z) - y*z, computed stably on both tails
        let softplus = if zv > T::zero() { zv + (-zv).exp().ln_1p() } else { zv.exp().ln_1p() };
        let loss = weight * (softplus - y * zv);
        let needs = self.nodes[z.0].needs_grad;
        Ok(self.push(Tensor::scalar(loss), Op::BceLogit { z, y, weight }, needs))
    }

    fn accumulate(&mut self, id: NodeId, g: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        let buf = node.grad.get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        for (a, &b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Reverse sweep from a scalar root. Rejects non-scalar roots. After the
    /// call, `grad` returns d(root)/d(node) for every gradient-tracked node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape");
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv3d { x, w, bias, stride, pad, mode } => {
                    let (x, w, bias, stride, pad, mode) = (*x, *w, *bias, *stride, *pad, *mode);
                    if self.nodes[x.0].needs_grad {
                        let gx = conv::conv3d_grad_input(
                            &gt,
                            &self.nodes[w.0].value,
                            &self.nodes[x.0].value.shape().to_vec(),
                            stride,
                            pad,
                            mode,
                        )?;
                        self.accumulate(x, gx.data());
                    }
                    if self.nodes[w.0].needs_grad {
                        let gw = conv::conv3d_grad_weights(
                            &gt,
                            &self.nodes[x.0].value,
                            &self.nodes[w.0].value.shape().to_vec(),
                            stride,
                            pad,
                            mode,
                        )?;
                        self.accumulate(w, gw.data());
                    }
                    if let Some(b) = bias {
                        if self.nodes[b.0].needs_grad {
                            let gb = conv::conv3d_grad_bias(&gt);
                            self.accumulate(b, &gb);
                        }
                    }
                }
                Op::Linear { x, w, bias } => {
                    let (x, w, bias) = (*x, *w, *bias);
                    if self.nodes[x.0].needs_grad {
                        let gx = nn::linear_grad_input(&g, &self.nodes[w.0].value);
                        self.accumulate(x, gx.data());
                    }
                    if self.nodes[w.0].needs_grad {
                        let gw = nn::linear_grad_weights(
                            &g,
                            &self.nodes[x.0].value,
                            &self.nodes[w.0].value.shape().to_vec(),
                        );
                        self.accumulate(w, gw.data());
                    }
                    if let Some(b) = bias {
                        self.accumulate(b, &g);
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, cache } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (gx, dg, db) = nn::batchnorm_train_backward(
                        &gt,
                        cache,
                        self.nodes[gamma.0].value.data(),
                    );
                    self.accumulate(x, gx.data());
                    self.accumulate(gamma, &dg);
                    self.accumulate(beta, &db);
                }
                Op::BatchNormEval { x, gamma, beta, mean, var, eps } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let c = mean.len();
                    let plane = gt.len() / c;
                    let gnode = &self.nodes[gamma.0].value;
                    let mut gx = vec![T::zero(); gt.len()];
                    let mut dgm = vec![T::zero(); c];
                    let mut dbt = vec![T::zero(); c];
                    let xv = &self.nodes[x.0].value;
                    for ci in 0..c {
                        let inv_std = T::one() / (var[ci] + *eps).sqrt();
                        let scale = gnode.data()[ci] * inv_std;
                        for k in 0..plane {
                            let idx = ci * plane + k;
                            gx[idx] = gt.data()[idx] * scale;
                            dgm[ci] += gt.data()[idx] * (xv.data()[idx] - mean[ci]) * inv_std;
                            dbt[ci] += gt.data()[idx];
                        }
                    }
                    self.accumulate(x, &gx);
                    self.accumulate(gamma, &dgm);
                    self.accumulate(beta, &dbt);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let gx = nn::relu_backward(&gt, &self.nodes[x.0].value);
                    self.accumulate(x, gx.data());
                }
                Op::ShiftedRelu { x, scale, shift } => {
                    let x = *x;
                    let c = scale.len();
                    let plane = gt.len() / c;
                    let xv = &self.nodes[x.0].value;
                    let mut gx = vec![T::zero(); gt.len()];
                    for ci in 0..c {
                        for k in 0..plane {
                            let idx = ci * plane + k;
                            let pre = xv.data()[idx] * scale[ci] + shift[ci];
                            if pre > T::zero() {
                                gx[idx] = gt.data()[idx] * scale[ci];
                            }
                        }
                    }
                    self.accumulate(x, &gx);
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let yv = &self.nodes[i].value;
                    let gx: Vec<T> = gt
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&gy, &t)| gy * (T::one() - t * t))
                        .collect();
                    self.accumulate(x, &gx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let yv = &self.nodes[i].value;
                    let gx: Vec<T> = gt
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&gy, &s)| gy * s * (T::one() - s))
                        .collect();
                    self.accumulate(x, &gx);
                }
                Op::Softmax { x } => {
                    let x = *x;
                    let gx = nn::softmax_backward(&g, self.nodes[i].value.data());
                    self.accumulate(x, &gx);
                }
                Op::MaxPool { x, argmax } => {
                    let x = *x;
                    let gx =
                        pool::maxpool3d_backward(&gt, argmax, &self.nodes[x.0].value.shape().to_vec());
                    self.accumulate(x, gx.data());
                }
                Op::AvgPool { x, k, stride } => {
                    let (x, k, stride) = (*x, *k, *stride);
                    let gx = pool::avgpool3d_backward(
                        &gt,
                        k,
                        stride,
                        &self.nodes[x.0].value.shape().to_vec(),
                    );
                    self.accumulate(x, gx.data());
                }
                Op::Concat { xs } => {
                    let xs = xs.clone();
                    let sizes: Vec<usize> =
                        xs.iter().map(|id| self.nodes[id.0].value.shape()[0]).collect();
                    let parts = nn::split_channels(&gt, &sizes)?;
                    for (id, part) in xs.iter().zip(parts) {
                        self.accumulate(*id, part.data());
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga: Vec<T> = g.iter().zip(&bv).map(|(&gy, &v)| gy * v).collect();
                    let gb: Vec<T> = g.iter().zip(&av).map(|(&gy, &v)| gy * v).collect();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::ScaleVec { s, v } => {
                    let (s, v) = (*s, *v);
                    let sv = self.nodes[s.0].value.data()[0];
                    let vv = self.nodes[v.0].value.data().to_vec();
                    let gs = g.iter().zip(&vv).fold(T::zero(), |acc, (&gy, &x)| acc + gy * x);
                    let gv: Vec<T> = g.iter().map(|&gy| gy * sv).collect();
                    self.accumulate(s, &[gs]);
                    self.accumulate(v, &gv);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len();
                    let gx = vec![g[0]; n];
                    self.accumulate(x, &gx);
                }
                Op::Pick { x, index } => {
                    let (x, index) = (*x, *index);
                    let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                    gx[index] = g[0];
                    self.accumulate(x, &gx);
                }
                Op::BceLogit { z, y, weight } => {
                    let (z, y, weight) = (*z, *y, *weight);
                    let zv = self.nodes[z.0].value.data()[0];
                    let gz = weight * (nn::sigmoid_scalar(zv) - y) * g[0];
                    self.accumulate(z, &[gz]);
                }
            }
            // keep root/leaf grads readable after the sweep
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Max over coordinates of |autodiff - central difference| / max(|central difference|, 1e-12).
///
/// `f` must be a pure scalar function of the tensor; the autodiff gradient to
/// compare against is supplied by the caller.
pub fn finite_diff_check<T: Scalar>(
    f: &dyn Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    autodiff_grad: &[T],
    h: T,
) -> Result<f64> {
    if h <= T::zero() {
        return Err(Error::Config("finite_diff_check: step must be positive".into()));
    }
    if autodiff_grad.len() != x.len() {
        return Err(Error::shape("finite_diff_check", "gradient length vs input"));
    }
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp)?;
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp)?;
        xp.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric("finite_diff_check", format!("non-finite evaluation at coordinate {}", i)));
        }
        let fd = (fp - fm).as_f64() / (2.0 * h.as_f64());
        let err = (autodiff_grad[i].as_f64() - fd).abs() / fd.abs().max(1e-12);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
