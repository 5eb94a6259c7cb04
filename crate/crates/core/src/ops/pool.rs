//! Max and average pooling over [C, D, H, W] volumes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pooled output extent; `pad` voxels on each side never contribute values.
pub fn pool_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("pool: stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape("pool", format!("kernel {} exceeds padded extent {}", k, padded)));
    }
    Ok((padded - k) / stride + 1)
}

/// Max pooling. Padding voxels are ignored (treated as -inf). Returns the
/// pooled tensor and, per output element, the flat input index of the winner;
/// ties resolve to the first winner in scan order.
pub fn maxpool3d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let od = pool_out_extent(d, k, stride, pad)?;
    let oh = pool_out_extent(h, k, stride, pad)?;
    let ow = pool_out_extent(w, k, stride, pad)?;
    let mut out = Tensor::zeros(vec![c, od, oh, ow]);
    let mut arg = vec![0u32; out.len()];
    let xd = x.data();
    let od_ = out.data_mut();
    for ci in 0..c {
        for di in 0..od {
            let d0 = (di * stride) as isize - pad as isize;
            for hi in 0..oh {
                let h0 = (hi * stride) as isize - pad as isize;
                for wi in 0..ow {
                    let w0 = (wi * stride) as isize - pad as isize;
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for a in 0..k {
                        let dd = d0 + a as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for b in 0..k {
                            let hh = h0 + b as isize;
                            if hh < 0 || hh >= h as isize {
                                continue;
                            }
                            for g in 0..k {
                                let ww = w0 + g as isize;
                                if ww < 0 || ww >= w as isize {
                                    continue;
                                }
                                let idx =
                                    ((ci * d + dd as usize) * h + hh as usize) * w + ww as usize;
                                let v = xd[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = ((ci * od + di) * oh + hi) * ow + wi;
                    od_[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Scatter output gradients back onto the winning input voxels.
pub fn maxpool3d_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u32], x_shape: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape.to_vec());
    let gd = gx.data_mut();
    for (o, &src) in argmax.iter().enumerate() {
        gd[src as usize] += dy.data()[o];
    }
    gx
}

/// Average pooling over complete windows only (no padding); divisor is k^3.
pub fn avgpool3d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let od = pool_out_extent(d, k, stride, 0)?;
    let oh = pool_out_extent(h, k, stride, 0)?;
    let ow = pool_out_extent(w, k, stride, 0)?;
    let inv = T::one() / T::of_f64((k * k * k) as f64);
    let mut out = Tensor::zeros(vec![c, od, oh, ow]);
    let xd = x.data();
    let od_ = out.data_mut();
    for ci in 0..c {
        for di in 0..od {
            for hi in 0..oh {
                for wi in 0..ow {
                    let mut acc = T::zero();
                    for a in 0..k {
                        for b in 0..k {
                            let row = ((ci * d + di * stride + a) * h + hi * stride + b) * w
                                + wi * stride;
                            for g in 0..k {
                                acc += xd[row + g];
                            }
                        }
                    }
                    od_[((ci * od + di) * oh + hi) * ow + wi] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Spread output gradients uniformly over each window.
pub fn avgpool3d_backward<T: Scalar>(
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
    x_shape: &[usize],
) -> Tensor<T> {
    let (c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (od, oh, ow) = (dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let inv = T::one() / T::of_f64((k * k * k) as f64);
    let mut gx = Tensor::zeros(x_shape.to_vec());
    let gd = gx.data_mut();
    for ci in 0..c {
        for di in 0..od {
            for hi in 0..oh {
                for wi in 0..ow {
                    let g_out = dy.data()[((ci * od + di) * oh + hi) * ow + wi] * inv;
                    for a in 0..k {
                        for b in 0..k {
                            let row = ((ci * d + di * stride + a) * h + hi * stride + b) * w
                                + wi * stride;
                            for g in 0..k {
                                gd[row + g] += g_out;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::{conv3d, PadMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_dominates_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(vec![2, 6, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let (y, arg) = maxpool3d(&x, 3, 2, 1).unwrap();
        // every output >= every covered input element; spot-check via argmax winner
        for (o, &src) in arg.iter().enumerate() {
            assert_eq!(y.data()[o], x.data()[src as usize]);
        }
        let (c, d, h, w) = (2, 6, 6, 6);
        let (od, oh, ow) = (y.shape()[1], y.shape()[2], y.shape()[3]);
        for ci in 0..c {
            for di in 0..od {
                for hi in 0..oh {
                    for wi in 0..ow {
                        let v = y.data()[((ci * od + di) * oh + hi) * ow + wi];
                        for a in 0..3usize {
                            for b in 0..3usize {
                                for g in 0..3usize {
                                    let dd = (di * 2 + a) as isize - 1;
                                    let hh = (hi * 2 + b) as isize - 1;
                                    let ww = (wi * 2 + g) as isize - 1;
                                    if dd < 0 || hh < 0 || ww < 0 {
                                        continue;
                                    }
                                    let (dd, hh, ww) = (dd as usize, hh as usize, ww as usize);
                                    if dd >= d || hh >= h || ww >= w {
                                        continue;
                                    }
                                    assert!(v >= x.data()[((ci * d + dd) * h + hh) * w + ww]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn avgpool_equals_uniform_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(vec![1, 4, 4, 4], |_| rng.gen_range(0.0..1.0));
        let y = avgpool3d(&x, 2, 2).unwrap();
        let w = Tensor::<f64>::full(vec![1, 1, 2, 2, 2], 1.0 / 8.0);
        let yc = conv3d(&x, &w, None, [2, 2, 2], [0, 0, 0], PadMode::Zero).unwrap();
        assert!(y.max_abs_diff(&yc).unwrap() <= 1e-6);
    }

    #[test]
    fn pool_backwards_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::from_fn(vec![1, 4, 4, 4], |_| rng.gen_range(0.0..1.0));
        let co = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let h = 1e-6;

        let (_, arg) = maxpool3d(&x, 2, 2, 0).unwrap();
        let gmax = maxpool3d_backward(&co, &arg, x.shape());
        let favg = |x: &Tensor<f64>| -> f64 {
            let y = avgpool3d(x, 2, 2).unwrap();
            y.data().iter().zip(co.data()).map(|(a, b)| a * b).sum()
        };
        let fmax = |x: &Tensor<f64>| -> f64 {
            let (y, _) = maxpool3d(x, 2, 2, 0).unwrap();
            y.data().iter().zip(co.data()).map(|(a, b)| a * b).sum()
        };
        let gavg = avgpool3d_backward(&co, 2, 2, x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            assert!((gavg.data()[i] - (favg(&xp) - favg(&xm)) / (2.0 * h)).abs() < 1e-6);
            assert!((gmax.data()[i] - (fmax(&xp) - fmax(&xm)) / (2.0 * h)).abs() < 1e-6);
        }
    }
}
