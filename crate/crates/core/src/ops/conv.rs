//! 3-D cross-correlation with zero or replication padding.
//!
//! Input layout [C, D, H, W], kernel layout [F, C, kd, kh, kw]. The stride-1
//! path materializes the padded volume once and runs contiguous
//! multiply-accumulate rows; a general fallback covers arbitrary strides.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How voxels outside the input are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    /// Out-of-range voxels read as zero.
    Zero,
    /// Out-of-range voxels read the nearest edge voxel (index clamping).
    Replicate,
}

/// Symmetric spatial padding amounts (depth, height, width).
pub type Pad3 = [usize; 3];
/// Per-axis strides (depth, height, width).
pub type Stride3 = [usize; 3];

/// Output extent of one axis: floor((in + 2p - k) / stride) + 1.
pub fn conv_out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("conv3d: stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "conv3d",
            format!("kernel extent {} exceeds padded input extent {}", k, padded),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: Stride3,
    pad: Pad3,
) -> Result<[usize; 3]> {
    if x.rank() != 4 || w.rank() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("expected input [C,D,H,W] and kernel [F,C,kd,kh,kw], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    if x.shape()[0] != w.shape()[1] {
        return Err(Error::shape(
            "conv3d",
            format!("input has {} channels, kernel expects {}", x.shape()[0], w.shape()[1]),
        ));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = conv_out_extent(x.shape()[1 + a], w.shape()[2 + a], pad[a], stride[a])?;
    }
    Ok(out)
}

/// Materialize the padded volume [C, D+2p, H+2p, W+2p].
pub fn pad_volume<T: Scalar>(x: &Tensor<T>, pad: Pad3, mode: PadMode) -> Tensor<T> {
    if pad == [0, 0, 0] {
        return x.clone();
    }
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (dp, hp, wp) = (d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]);
    let mut out = Tensor::zeros(vec![c, dp, hp, wp]);
    let clamp = |i: isize, n: usize| -> Option<usize> {
        if i < 0 || i >= n as isize {
            match mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
            }
        } else {
            Some(i as usize)
        }
    };
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for di in 0..dp {
            let sd = clamp(di as isize - pad[0] as isize, d);
            for hi in 0..hp {
                let sh = clamp(hi as isize - pad[1] as isize, h);
                let orow = ((ci * dp + di) * hp + hi) * wp;
                if let (Some(sd), Some(sh)) = (sd, sh) {
                    let srow = ((ci * d + sd) * h + sh) * w;
                    // interior columns copy as a block
                    od[orow + pad[2]..orow + pad[2] + w].copy_from_slice(&xd[srow..srow + w]);
                    if mode == PadMode::Replicate {
                        for wi in 0..pad[2] {
                            od[orow + wi] = xd[srow];
                            od[orow + pad[2] + w + wi] = xd[srow + w - 1];
                        }
                    }
                } else if mode == PadMode::Replicate {
                    // both Some or replicate: here at least one axis clamped
                    let sd = sd.unwrap_or_else(|| {
                        (di as isize - pad[0] as isize).clamp(0, d as isize - 1) as usize
                    });
                    let sh = sh.unwrap_or_else(|| {
                        (hi as isize - pad[1] as isize).clamp(0, h as isize - 1) as usize
                    });
                    let srow = ((ci * d + sd) * h + sh) * w;
                    for wi in 0..wp {
                        let sw = (wi as isize - pad[2] as isize).clamp(0, w as isize - 1) as usize;
                        od[orow + wi] = xd[srow + sw];
                    }
                }
            }
        }
    }
    out
}

/// Fold a padded-volume gradient back onto the source extents.
///
/// Zero padding drops border gradients; replication accumulates them onto the
/// clamped source voxel.
pub fn unpad_grad<T: Scalar>(gp: &Tensor<T>, pad: Pad3, mode: PadMode, shape: &[usize]) -> Tensor<T> {
    if pad == [0, 0, 0] {
        return gp.clone();
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (dp, hp, wp) = (d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]);
    let mut out = Tensor::zeros(shape.to_vec());
    let gd = gp.data();
    let od = out.data_mut();
    for ci in 0..c {
        for di in 0..dp {
            let sd = di as isize - pad[0] as isize;
            let keep_d = sd >= 0 && sd < d as isize;
            if !keep_d && mode == PadMode::Zero {
                continue;
            }
            let sd = sd.clamp(0, d as isize - 1) as usize;
            for hi in 0..hp {
                let sh = hi as isize - pad[1] as isize;
                let keep_h = sh >= 0 && sh < h as isize;
                if !keep_h && mode == PadMode::Zero {
                    continue;
                }
                let sh = sh.clamp(0, h as isize - 1) as usize;
                let grow = ((ci * dp + di) * hp + hi) * wp;
                let srow = ((ci * d + sd) * h + sh) * w;
                for wi in 0..wp {
                    let sw = wi as isize - pad[2] as isize;
                    if sw >= 0 && (sw as usize) < w {
                        od[srow + sw as usize] += gd[grow + wi];
                    } else if mode == PadMode::Replicate {
                        od[srow + sw.clamp(0, w as isize - 1) as usize] += gd[grow + wi];
                    }
                }
            }
        }
    }
    out
}

/// 3-D cross-correlation. `bias`, when present, has one entry per filter.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: Stride3,
    pad: Pad3,
    mode: PadMode,
) -> Result<Tensor<T>> {
    let out_sp = check_conv_shapes(x, w, stride, pad)?;
    let f = w.shape()[0];
    if let Some(b) = bias {
        if b.len() != f {
            return Err(Error::shape("conv3d", format!("bias length {} vs {} filters", b.len(), f)));
        }
    }
    let mut out = Tensor::zeros(vec![f, out_sp[0], out_sp[1], out_sp[2]]);
    if let Some(b) = bias {
        let plane = out_sp[0] * out_sp[1] * out_sp[2];
        for (fi, &bv) in b.iter().enumerate() {
            out.data_mut()[fi * plane..(fi + 1) * plane].fill(bv);
        }
    }
    if stride == [1, 1, 1] {
        conv3d_unit_stride(x, w, pad, mode, &mut out);
    } else {
        conv3d_general(x, w, stride, pad, mode, &mut out);
    }
    Ok(out)
}

/// Stride-1 path: pad once, then one saxpy row per (f, c, kernel offset, d, h).
fn conv3d_unit_stride<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: Pad3,
    mode: PadMode,
    out: &mut Tensor<T>,
) {
    let xp = pad_volume(x, pad, mode);
    let (c, dp, hp, wp) = (xp.shape()[0], xp.shape()[1], xp.shape()[2], xp.shape()[3]);
    let (f, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let (od, oh, ow) = (out.shape()[1], out.shape()[2], out.shape()[3]);
    debug_assert_eq!(od, dp - kd + 1);
    let xd = xp.data();
    let wd = w.data();
    let outd = out.data_mut();
    for fi in 0..f {
        for ci in 0..c {
            for a in 0..kd {
                for b in 0..kh {
                    for g in 0..kw {
                        let wv = wd[(((fi * c + ci) * kd + a) * kh + b) * kw + g];
                        if wv == T::zero() {
                            continue;
                        }
                        for di in 0..od {
                            for hi in 0..oh {
                                let src = ((ci * dp + di + a) * hp + hi + b) * wp + g;
                                let dst = ((fi * od + di) * oh + hi) * ow;
                                let xr = &xd[src..src + ow];
                                let or = &mut outd[dst..dst + ow];
                                for i in 0..ow {
                                    or[i] += wv * xr[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Naive strided fallback (cold path; strides > 1 only appear in tests).
fn conv3d_general<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: Stride3,
    pad: Pad3,
    mode: PadMode,
    out: &mut Tensor<T>,
) {
    let xp = pad_volume(x, pad, mode);
    let (c, dp, hp, wp) = (xp.shape()[0], xp.shape()[1], xp.shape()[2], xp.shape()[3]);
    let (f, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let (od, oh, ow) = (out.shape()[1], out.shape()[2], out.shape()[3]);
    let xd = xp.data();
    let wd = w.data();
    let outd = out.data_mut();
    for fi in 0..f {
        for di in 0..od {
            for hi in 0..oh {
                for wi in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for g in 0..kw {
                                    let xv = xd[((ci * dp + di * stride[0] + a) * hp
                                        + hi * stride[1]
                                        + b)
                                        * wp
                                        + wi * stride[2]
                                        + g];
                                    acc += xv * wd[(((fi * c + ci) * kd + a) * kh + b) * kw + g];
                                }
                            }
                        }
                    }
                    outd[((fi * od + di) * oh + hi) * ow + wi] += acc;
                }
            }
        }
    }
    let _ = (dp, hp, wp);
}

/// Gradient of the conv output w.r.t. its input.
pub fn conv3d_grad_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: Stride3,
    pad: Pad3,
    mode: PadMode,
) -> Result<Tensor<T>> {
    let (c, d, h, wd_) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (f, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    if dy.shape()[0] != f || w.shape()[1] != c {
        return Err(Error::shape("conv3d_grad_input", format!("dy {:?} / w {:?}", dy.shape(), w.shape())));
    }
    let (dp, hp, wp) = (d + 2 * pad[0], h + 2 * pad[1], wd_ + 2 * pad[2]);
    let mut gp = Tensor::zeros(vec![c, dp, hp, wp]);
    let (od, oh, ow) = (dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let dyd = dy.data();
    let wdat = w.data();
    let gpd = gp.data_mut();
    if stride == [1, 1, 1] {
        for fi in 0..f {
            for ci in 0..c {
                for a in 0..kd {
                    for b in 0..kh {
                        for g in 0..kw {
                            let wv = wdat[(((fi * c + ci) * kd + a) * kh + b) * kw + g];
                            if wv == T::zero() {
                                continue;
                            }
                            for di in 0..od {
                                for hi in 0..oh {
                                    let src = ((fi * od + di) * oh + hi) * ow;
                                    let dst = ((ci * dp + di + a) * hp + hi + b) * wp + g;
                                    let dyr = &dyd[src..src + ow];
                                    let gr = &mut gpd[dst..dst + ow];
                                    for i in 0..ow {
                                        gr[i] += wv * dyr[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for fi in 0..f {
            for di in 0..od {
                for hi in 0..oh {
                    for wi in 0..ow {
                        let g_out = dyd[((fi * od + di) * oh + hi) * ow + wi];
                        if g_out == T::zero() {
                            continue;
                        }
                        for ci in 0..c {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for g in 0..kw {
                                        let wv =
                                            wdat[(((fi * c + ci) * kd + a) * kh + b) * kw + g];
                                        gpd[((ci * dp + di * stride[0] + a) * hp
                                            + hi * stride[1]
                                            + b)
                                            * wp
                                            + wi * stride[2]
                                            + g] += wv * g_out;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(unpad_grad(&gp, pad, mode, x_shape))
}

/// Gradient of the conv output w.r.t. the kernel.
pub fn conv3d_grad_weights<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    kernel_shape: &[usize],
    stride: Stride3,
    pad: Pad3,
    mode: PadMode,
) -> Result<Tensor<T>> {
    let xp = pad_volume(x, pad, mode);
    let (c, dp, hp, wp) = (xp.shape()[0], xp.shape()[1], xp.shape()[2], xp.shape()[3]);
    let (f, kd, kh, kw) = (
        kernel_shape[0],
        kernel_shape[2],
        kernel_shape[3],
        kernel_shape[4],
    );
    if kernel_shape[1] != c || dy.shape()[0] != f {
        return Err(Error::shape("conv3d_grad_weights", format!("dy {:?} / kernel {:?}", dy.shape(), kernel_shape)));
    }
    let (od, oh, ow) = (dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let mut dw = Tensor::zeros(kernel_shape.to_vec());
    let xd = xp.data();
    let dyd = dy.data();
    let dwd = dw.data_mut();
    for fi in 0..f {
        for ci in 0..c {
            for a in 0..kd {
                for b in 0..kh {
                    for g in 0..kw {
                        let mut acc = T::zero();
                        for di in 0..od {
                            for hi in 0..oh {
                                let xrow =
                                    ((ci * dp + di * stride[0] + a) * hp + hi * stride[1] + b) * wp;
                                let yrow = ((fi * od + di) * oh + hi) * ow;
                                if stride[2] == 1 {
                                    let xr = &xd[xrow + g..xrow + g + ow];
                                    let yr = &dyd[yrow..yrow + ow];
                                    for i in 0..ow {
                                        acc += xr[i] * yr[i];
                                    }
                                } else {
                                    for wi in 0..ow {
                                        acc += xd[xrow + wi * stride[2] + g] * dyd[yrow + wi];
                                    }
                                }
                            }
                        }
                        dwd[(((fi * c + ci) * kd + a) * kh + b) * kw + g] = acc;
                    }
                }
            }
        }
    }
    Ok(dw)
}

/// Gradient w.r.t. the per-filter bias: sum of dy over each filter's plane.
pub fn conv3d_grad_bias<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let f = dy.shape()[0];
    let plane = dy.len() / f;
    (0..f)
        .map(|fi| dy.data()[fi * plane..(fi + 1) * plane].iter().fold(T::zero(), |a, &b| a + b))
        .collect()
}
