//! Dense layers, batch normalization, activations and elementwise ops.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// y = W x (+ b), W is [out, in], x is flat.
pub fn linear<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    if x.len() != i {
        return Err(Error::shape("linear", format!("weight [{},{}] vs input {}", o, i, x.len())));
    }
    let mut out = vec![T::zero(); o];
    let wd = w.data();
    let xd = x.data();
    for oi in 0..o {
        let row = &wd[oi * i..(oi + 1) * i];
        let mut acc = T::zero();
        for k in 0..i {
            acc += row[k] * xd[k];
        }
        out[oi] = acc;
    }
    if let Some(b) = bias {
        for (v, &bv) in out.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Tensor::new(vec![o], out)
}

pub fn linear_grad_input<T: Scalar>(dy: &[T], w: &Tensor<T>) -> Tensor<T> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut gx = vec![T::zero(); i];
    let wd = w.data();
    for oi in 0..o {
        let g = dy[oi];
        if g == T::zero() {
            continue;
        }
        let row = &wd[oi * i..(oi + 1) * i];
        for k in 0..i {
            gx[k] += row[k] * g;
        }
    }
    Tensor::new(vec![i], gx).expect("length fixed")
}

pub fn linear_grad_weights<T: Scalar>(dy: &[T], x: &Tensor<T>, w_shape: &[usize]) -> Tensor<T> {
    let (o, i) = (w_shape[0], w_shape[1]);
    let mut gw = vec![T::zero(); o * i];
    for oi in 0..o {
        let g = dy[oi];
        for k in 0..i {
            gw[oi * i + k] = g * x.data()[k];
        }
    }
    Tensor::new(vec![o, i], gw).expect("length fixed")
}

/// Frozen-statistics batch norm over [C, ...spatial]: per-channel affine.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.shape()[0];
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::shape("batchnorm", format!("{} channels vs parameter lengths", c)));
    }
    let plane = x.len() / c;
    let mut out = x.clone();
    let od = out.data_mut();
    for ci in 0..c {
        let inv = gamma[ci] / (var[ci] + eps).sqrt();
        let shift = beta[ci] - mean[ci] * inv;
        for v in &mut od[ci * plane..(ci + 1) * plane] {
            *v = *v * inv + shift;
        }
    }
    Ok(out)
}

/// Saved values from a training-mode batch norm, enough for backward and
/// for the exponential update of running statistics.
pub struct BnCache<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub x_hat: Vec<T>,
}

/// Training-mode batch norm: statistics per channel over the spatial extent
/// of this sample. Variance is the biased estimator.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = x.shape()[0];
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batchnorm", format!("{} channels vs parameter lengths", c)));
    }
    let plane = x.len() / c;
    let n = T::of_f64(plane as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut x_hat = vec![T::zero(); x.len()];
    let mut out = x.clone();
    for ci in 0..c {
        let xs = &x.data()[ci * plane..(ci + 1) * plane];
        let m = xs.iter().fold(T::zero(), |a, &b| a + b) / n;
        let v = xs.iter().fold(T::zero(), |a, &b| a + (b - m) * (b - m)) / n;
        let is = T::one() / (v + eps).sqrt();
        mean[ci] = m;
        var[ci] = v;
        inv_std[ci] = is;
        let xh = &mut x_hat[ci * plane..(ci + 1) * plane];
        let od = &mut out.data_mut()[ci * plane..(ci + 1) * plane];
        for k in 0..plane {
            let h = (xs[k] - m) * is;
            xh[k] = h;
            od[k] = gamma[ci] * h + beta[ci];
        }
    }
    Ok((out, BnCache { mean, var, inv_std, x_hat }))
}

/// Backward through training-mode batch norm.
/// Returns (d_input, d_gamma, d_beta).
pub fn batchnorm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let plane = dy.len() / c;
    let n = T::of_f64(plane as f64);
    let mut gx = Tensor::zeros(dy.shape().to_vec());
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for ci in 0..c {
        let dys = &dy.data()[ci * plane..(ci + 1) * plane];
        let xh = &cache.x_hat[ci * plane..(ci + 1) * plane];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for k in 0..plane {
            sum_dy += dys[k];
            sum_dy_xh += dys[k] * xh[k];
        }
        dg[ci] = sum_dy_xh;
        db[ci] = sum_dy;
        let scale = gamma[ci] * cache.inv_std[ci];
        let gxs = &mut gx.data_mut()[ci * plane..(ci + 1) * plane];
        for k in 0..plane {
            gxs[k] = scale * (dys[k] - sum_dy / n - xh[k] * sum_dy_xh / n);
        }
    }
    (gx, dg, db)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(dy.shape().to_vec(), |i| {
        if x.data()[i] > T::zero() {
            dy.data()[i]
        } else {
            T::zero()
        }
    })
}

/// relu(scale * x + shift) with per-channel scale and shift. This is the
/// canonized residue of a batch-norm that preceded an activation.
pub fn shifted_relu<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let c = x.shape()[0];
    let plane = x.len() / c;
    let mut out = x.clone();
    for ci in 0..c {
        let (s, t) = (scale[ci], shift[ci]);
        for v in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
            *v = (*v * s + t).max(T::zero());
        }
    }
    out
}

pub fn tanh_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Max-subtracted softmax over a flat vector.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / z).collect()
}

/// dy through softmax: dx_i = y_i (dy_i - sum_j dy_j y_j).
pub fn softmax_backward<T: Scalar>(dy: &[T], y: &[T]) -> Vec<T> {
    let dot = dy.iter().zip(y).fold(T::zero(), |a, (&g, &v)| a + g * v);
    dy.iter().zip(y).map(|(&g, &v)| v * (g - dot)).collect()
}

/// Concatenate along the channel axis; trailing extents must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Data("concat of zero tensors".into()));
    }
    let tail = &parts[0].shape()[1..];
    let mut c = 0;
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", p.shape(), parts[0].shape())));
        }
        c += p.shape()[0];
    }
    let mut shape = vec![c];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// Split channels back into blocks of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape()[0] {
        return Err(Error::shape("split", format!("{} channels vs sizes {:?}", x.shape()[0], sizes)));
    }
    let plane: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        let mut shape = vec![s];
        shape.extend_from_slice(&x.shape()[1..]);
        out.push(Tensor::new(shape, x.data()[off * plane..(off + s) * plane].to_vec())?);
        off += s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_basics() {
        let w = Tensor::<f64>::new(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
        let x = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = linear(&w, &x, Some(&[0.5, -0.5])).unwrap();
        assert_eq!(y.data(), &[1.0 - 3.0 + 0.5, 2.0 + 2.0 + 1.5 - 0.5]);
    }

    #[test]
    fn batchnorm_eval_affine() {
        let x = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        let y = batchnorm_eval(&x, &[2.0], &[1.0], &[3.0], &[4.0], 0.0).unwrap();
        // (x - 3) / 2 * 2 + 1 = x - 2
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(vec![3, 4, 4, 4], |_| rng.gen_range(-2.0..2.0));
        let (y, cache) = batchnorm_train(&x, &[1.0; 3], &[0.0; 3], 1e-8).unwrap();
        let plane = 64;
        for ci in 0..3 {
            let ys = &y.data()[ci * plane..(ci + 1) * plane];
            let m: f64 = ys.iter().sum::<f64>() / plane as f64;
            let v: f64 = ys.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / plane as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert_eq!(cache.mean.len(), 3);
    }

    #[test]
    fn batchnorm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::from_fn(vec![2, 3, 1, 1], |_| rng.gen_range(-1.0..1.0));
        let gamma = [1.3, -0.7];
        let beta = [0.2, 0.4];
        let co = Tensor::<f64>::from_fn(vec![2, 3, 1, 1], |_| rng.gen_range(-1.0..1.0));
        let f = |x: &Tensor<f64>, gamma: &[f64], beta: &[f64]| -> f64 {
            let (y, _) = batchnorm_train(x, gamma, beta, 1e-8).unwrap();
            y.data().iter().zip(co.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = batchnorm_train(&x, &gamma, &beta, 1e-8).unwrap();
        let (gx, dg, db) = batchnorm_train_backward(&co, &cache, &gamma);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &gamma, &beta) - f(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((gx.data()[i] - fd).abs() < 1e-6);
        }
        for ci in 0..2 {
            let mut gp = gamma;
            gp[ci] += h;
            let mut gm = gamma;
            gm[ci] -= h;
            let fd = (f(&x, &gp, &beta) - f(&x, &gm, &beta)) / (2.0 * h);
            assert!((dg[ci] - fd).abs() < 1e-6);
            let mut bp = beta;
            bp[ci] += h;
            let mut bm = beta;
            bm[ci] -= h;
            let fd = (f(&x, &gamma, &bp) - f(&x, &gamma, &bm)) / (2.0 * h);
            assert!((db[ci] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_normalizes_and_backward_is_orthogonal_to_ones() {
        let y = softmax(&[0.556770f64, 0.0]);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((y[0] - 0.63566).abs() < 5e-5);
        let g = softmax_backward(&[1.0, 0.0], &y);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f32>::from_fn(vec![2, 2, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![3, 2, 2, 2], |i| -(i as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[5, 2, 2, 2]);
        let parts = split_channels(&cat, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(800.0f64), 1.0);
        assert_eq!(sigmoid_scalar(-800.0f64), 0.0);
        assert!((sigmoid_scalar(0.0f64) - 0.5).abs() < 1e-15);
    }
}
