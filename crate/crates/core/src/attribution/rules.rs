//! Relevance redistribution rules for linear layers and multiplicative gates.
//!
//! All rules ignore bias parameters: contributions are z_ij = w_ij * x_i and
//! each output's relevance is split over its inputs in proportion to (a
//! function of) those contributions.

use crate::error::{Error, Result};
use crate::ops::conv::{Pad3, PadMode, Stride3};
use crate::ops::{conv, pool};
use crate::tensor::{Scalar, Tensor};

/// Redistribution rule for a linear (FC or conv) layer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum LinRule {
    /// z / (sum z + eps * sign(sum z)).
    Epsilon,
    /// Separate positive and negative contributions; alpha - beta = 1.
    AlphaBeta,
    /// Bounded-input rule for the layer reading the image.
    ZBeta,
}

/// How the relevance of an elementwise product splits over its two operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitVariant {
    /// Proportional to absolute activations: R_s = |s| / (|s| + |g|) * R.
    Proposed,
    /// The signal (cell-input) operand takes all relevance, the gate none.
    LrpAll,
}

/// Numeric parameters shared by the rules.
#[derive(Clone, Copy, Debug)]
pub struct RuleParams<T: Scalar> {
    pub epsilon: T,
    pub alpha: T,
    pub beta: T,
    pub zbeta_low: T,
    pub zbeta_high: T,
    /// Degenerate-split guard: |s| + |g| below this splits equally.
    pub delta: T,
}

impl<T: Scalar> RuleParams<T> {
    pub fn paper_defaults() -> Self {
        RuleParams {
            epsilon: T::of_f64(1e-8),
            alpha: T::one(),
            beta: T::zero(),
            zbeta_low: T::zero(),
            zbeta_high: T::one(),
            delta: T::of_f64(1e-12),
        }
    }
}

#[inline]
fn stabilize<T: Scalar>(denom: T, eps: T) -> T {
    if denom >= T::zero() {
        denom + eps
    } else {
        denom - eps
    }
}

/// Split the relevance of an elementwise product s ⊙ g over its operands.
///
/// `Proposed`: proportional to |s| and |g|, equal halves when |s|+|g| < delta.
/// `LrpAll`: everything to the signal operand.
/// Both variants satisfy R_s + R_g = R elementwise.
pub fn split_multiplicative<T: Scalar>(
    s: &[T],
    g: &[T],
    r: &[T],
    variant: SplitVariant,
    delta: T,
) -> Result<(Vec<T>, Vec<T>)> {
    if s.len() != g.len() || s.len() != r.len() {
        return Err(Error::shape(
            "split_multiplicative",
            format!("lengths {} / {} / {}", s.len(), g.len(), r.len()),
        ));
    }
    match variant {
        SplitVariant::LrpAll => Ok((r.to_vec(), vec![T::zero(); r.len()])),
        SplitVariant::Proposed => {
            let mut rs = Vec::with_capacity(r.len());
            let mut rg = Vec::with_capacity(r.len());
            let half = T::of_f64(0.5);
            for i in 0..r.len() {
                let (sa, ga) = (s[i].abs(), g[i].abs());
                let tot = sa + ga;
                if tot < delta {
                    rs.push(half * r[i]);
                    rg.push(half * r[i]);
                } else {
                    rs.push(sa / tot * r[i]);
                    rg.push(ga / tot * r[i]);
                }
            }
            Ok((rs, rg))
        }
    }
}

/// Redistribute one output neuron's relevance over a contribution vector.
/// Used for the attention-pooling sum and other small dense structures.
pub fn redistribute_contributions<T: Scalar>(
    z: &[T],
    r_out: T,
    rule: LinRule,
    p: &RuleParams<T>,
) -> Vec<T> {
    match rule {
        LinRule::Epsilon | LinRule::ZBeta => {
            // ZBeta degenerates to epsilon off the input layer.
            let denom = stabilize(z.iter().fold(T::zero(), |a, &b| a + b), p.epsilon);
            z.iter().map(|&v| v / denom * r_out).collect()
        }
        LinRule::AlphaBeta => {
            let pos: T = z.iter().fold(T::zero(), |a, &b| a + b.max(T::zero()));
            let neg: T = z.iter().fold(T::zero(), |a, &b| a + b.min(T::zero()));
            let mut out = vec![T::zero(); z.len()];
            if pos > T::zero() {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o += p.alpha * v.max(T::zero()) / pos * r_out;
                }
            } else if p.alpha != T::zero() {
                // degenerate positive pool: fall back to |z| proportions
                let abs: T = z.iter().fold(T::zero(), |a, &b| a + b.abs());
                if abs > T::zero() {
                    for (o, &v) in out.iter_mut().zip(z) {
                        *o += p.alpha * v.abs() / abs * r_out;
                    }
                }
            }
            if p.beta != T::zero() && neg < T::zero() {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o -= p.beta * v.min(T::zero()) / neg * r_out;
                }
            }
            out
        }
    }
}

/// Redistribute relevance through a fully connected layer (weight [O, I]).
/// `x` is the layer's input activation; biases are not considered.
pub fn fc_redistribute<T: Scalar>(
    w: &Tensor<T>,
    x: &[T],
    r_out: &[T],
    rule: LinRule,
    p: &RuleParams<T>,
) -> Result<Vec<T>> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    if x.len() != i || r_out.len() != o {
        return Err(Error::shape(
            "fc_redistribute",
            format!("weight [{},{}] vs x {} / r {}", o, i, x.len(), r_out.len()),
        ));
    }
    let mut r_in = vec![T::zero(); i];
    let wd = w.data();
    match rule {
        LinRule::Epsilon => {
            for oi in 0..o {
                if r_out[oi] == T::zero() {
                    continue;
                }
                let row = &wd[oi * i..(oi + 1) * i];
                let z_sum = row.iter().zip(x).fold(T::zero(), |a, (&wv, &xv)| a + wv * xv);
                let f = r_out[oi] / stabilize(z_sum, p.epsilon);
                for k in 0..i {
                    r_in[k] += row[k] * x[k] * f;
                }
            }
        }
        LinRule::AlphaBeta => {
            for oi in 0..o {
                if r_out[oi] == T::zero() {
                    continue;
                }
                let row = &wd[oi * i..(oi + 1) * i];
                let z: Vec<T> = row.iter().zip(x).map(|(&wv, &xv)| wv * xv).collect();
                let shares = redistribute_contributions(&z, r_out[oi], rule, p);
                for k in 0..i {
                    r_in[k] += shares[k];
                }
            }
        }
        LinRule::ZBeta => {
            let (low, high) = (p.zbeta_low, p.zbeta_high);
            for oi in 0..o {
                if r_out[oi] == T::zero() {
                    continue;
                }
                let row = &wd[oi * i..(oi + 1) * i];
                let mut denom = T::zero();
                for k in 0..i {
                    let wp = row[k].max(T::zero());
                    let wn = row[k].min(T::zero());
                    denom += row[k] * x[k] - low * wp - high * wn;
                }
                let f = r_out[oi] / (denom + p.epsilon);
                for k in 0..i {
                    let wp = row[k].max(T::zero());
                    let wn = row[k].min(T::zero());
                    r_in[k] += (row[k] * x[k] - low * wp - high * wn) * f;
                }
            }
        }
    }
    Ok(r_in)
}

fn tensor_pos<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()))
}

fn tensor_neg<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.min(T::zero()))
}

fn tensor_abs<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.abs())
}

/// Redistribute relevance through a convolution (bias ignored).
pub fn conv_redistribute<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: Stride3,
    pad: Pad3,
    mode: PadMode,
    r_out: &Tensor<T>,
    rule: LinRule,
    p: &RuleParams<T>,
) -> Result<Tensor<T>> {
    match rule {
        LinRule::Epsilon => {
            let z = conv::conv3d(x, weight, None, stride, pad, mode)?;
            let f = Tensor::from_fn(z.shape().to_vec(), |i| {
                r_out.data()[i] / stabilize(z.data()[i], p.epsilon)
            });
            let back = conv::conv3d_grad_input(&f, weight, x.shape(), stride, pad, mode)?;
            Ok(Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * back.data()[i]))
        }
        LinRule::AlphaBeta => {
            let wp = tensor_pos(weight);
            let wn = tensor_neg(weight);
            let xp = tensor_pos(x);
            let xn = tensor_neg(x);
            let has_neg_x = x.data().iter().any(|&v| v < T::zero());
            // positive contribution pool: w+*x+ (+ w-*x- when x has negatives)
            let mut pos = conv::conv3d(&xp, &wp, None, stride, pad, mode)?;
            if has_neg_x {
                let extra = conv::conv3d(&xn, &wn, None, stride, pad, mode)?;
                for (a, &b) in pos.data_mut().iter_mut().zip(extra.data()) {
                    *a += b;
                }
            }
            let mut degenerate = false;
            let fp = Tensor::from_fn(pos.shape().to_vec(), |i| {
                if pos.data()[i] > T::zero() {
                    p.alpha * r_out.data()[i] / pos.data()[i]
                } else {
                    if r_out.data()[i] != T::zero() {
                        degenerate = true;
                    }
                    T::zero()
                }
            });
            let mut r_in = {
                let b1 = conv::conv3d_grad_input(&fp, &wp, x.shape(), stride, pad, mode)?;
                let mut acc =
                    Tensor::from_fn(x.shape().to_vec(), |i| xp.data()[i] * b1.data()[i]);
                if has_neg_x {
                    let b2 = conv::conv3d_grad_input(&fp, &wn, x.shape(), stride, pad, mode)?;
                    for (a, i) in acc.data_mut().iter_mut().zip(0..) {
                        *a += xn.data()[i] * b2.data()[i];
                    }
                }
                acc
            };
            if p.beta != T::zero() {
                let mut neg = conv::conv3d(&xp, &wn, None, stride, pad, mode)?;
                if has_neg_x {
                    let extra = conv::conv3d(&xn, &wp, None, stride, pad, mode)?;
                    for (a, &b) in neg.data_mut().iter_mut().zip(extra.data()) {
                        *a += b;
                    }
                }
                let fnn = Tensor::from_fn(neg.shape().to_vec(), |i| {
                    if neg.data()[i] < T::zero() {
                        -p.beta * r_out.data()[i] / neg.data()[i]
                    } else {
                        T::zero()
                    }
                });
                let b1 = conv::conv3d_grad_input(&fnn, &wn, x.shape(), stride, pad, mode)?;
                for i in 0..r_in.len() {
                    r_in.data_mut()[i] += xp.data()[i] * b1.data()[i];
                }
                if has_neg_x {
                    let b2 = conv::conv3d_grad_input(&fnn, &wp, x.shape(), stride, pad, mode)?;
                    for i in 0..r_in.len() {
                        r_in.data_mut()[i] += xn.data()[i] * b2.data()[i];
                    }
                }
            }
            if degenerate {
                // outputs whose positive pool vanished: route their alpha share
                // by |z| so relevance is not silently dropped
                let xa = tensor_abs(x);
                let wa = tensor_abs(weight);
                let abs_pool = conv::conv3d(&xa, &wa, None, stride, pad, mode)?;
                let fa = Tensor::from_fn(abs_pool.shape().to_vec(), |i| {
                    if pos.data()[i] <= T::zero()
                        && r_out.data()[i] != T::zero()
                        && abs_pool.data()[i] > T::zero()
                    {
                        p.alpha * r_out.data()[i] / abs_pool.data()[i]
                    } else {
                        T::zero()
                    }
                });
                let back = conv::conv3d_grad_input(&fa, &wa, x.shape(), stride, pad, mode)?;
                for i in 0..r_in.len() {
                    r_in.data_mut()[i] += xa.data()[i] * back.data()[i];
                }
            }
            Ok(r_in)
        }
        LinRule::ZBeta => {
            let z = conv::conv3d(x, weight, None, stride, pad, mode)?;
            let wp = tensor_pos(weight);
            let wn = tensor_neg(weight);
            let lo = Tensor::full(x.shape().to_vec(), p.zbeta_low);
            let hi = Tensor::full(x.shape().to_vec(), p.zbeta_high);
            let zl = conv::conv3d(&lo, &wp, None, stride, pad, mode)?;
            let zh = conv::conv3d(&hi, &wn, None, stride, pad, mode)?;
            let f = Tensor::from_fn(z.shape().to_vec(), |i| {
                let d = z.data()[i] - zl.data()[i] - zh.data()[i];
                r_out.data()[i] / (d + p.epsilon)
            });
            let bw = conv::conv3d_grad_input(&f, weight, x.shape(), stride, pad, mode)?;
            let bp = conv::conv3d_grad_input(&f, &wp, x.shape(), stride, pad, mode)?;
            let bn = conv::conv3d_grad_input(&f, &wn, x.shape(), stride, pad, mode)?;
            Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
                x.data()[i] * bw.data()[i] - p.zbeta_low * bp.data()[i]
                    - p.zbeta_high * bn.data()[i]
            }))
        }
    }
}

/// Winner-take-all redistribution through a max pool.
pub fn maxpool_redistribute<T: Scalar>(
    r_out: &Tensor<T>,
    argmax: &[u32],
    x_shape: &[usize],
) -> Tensor<T> {
    pool::maxpool3d_backward(r_out, argmax, x_shape)
}

/// Redistribute through an average pool: each window acts as a tiny linear
/// layer with uniform weights, handled per channel with the given rule.
pub fn avgpool_redistribute<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    r_out: &Tensor<T>,
    rule: LinRule,
    p: &RuleParams<T>,
) -> Result<Tensor<T>> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (r_out.shape()[1], r_out.shape()[2], r_out.shape()[3]);
    let inv = T::one() / T::of_f64((k * k * k) as f64);
    let mut r_in = Tensor::zeros(x.shape().to_vec());
    let mut z = vec![T::zero(); k * k * k];
    for ci in 0..c {
        for di in 0..od {
            for hi in 0..oh {
                for wi in 0..ow {
                    let r = r_out.data()[((ci * od + di) * oh + hi) * ow + wi];
                    if r == T::zero() {
                        continue;
                    }
                    let mut idx = 0;
                    for a in 0..k {
                        for b in 0..k {
                            let row = ((ci * d + di * stride + a) * h + hi * stride + b) * w
                                + wi * stride;
                            for g in 0..k {
                                z[idx] = x.data()[row + g] * inv;
                                idx += 1;
                            }
                        }
                    }
                    let shares = redistribute_contributions(&z, r, rule, p);
                    let mut idx = 0;
                    for a in 0..k {
                        for b in 0..k {
                            let row = ((ci * d + di * stride + a) * h + hi * stride + b) * w
                                + wi * stride;
                            for g in 0..k {
                                r_in.data_mut()[row + g] += shares[idx];
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(r_in)
}
