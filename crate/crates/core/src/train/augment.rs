//! Data augmentation: random flips, 90-degree rotations, Gaussian noise, and
//! random affine (rotation + isotropic scaling) with trilinear resampling.
//!
//! One transform draw applies identically to every contrast of a sample;
//! outputs are re-clamped to [0, 1].

use super::Sample;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flips: bool,
    pub rotate90: bool,
    /// Standard deviation of additive Gaussian noise; 0 disables.
    pub noise_sigma: f32,
    pub affine: bool,
    /// Maximum rotation around each axis, degrees.
    pub max_rotation_deg: f32,
    /// Maximum relative scaling, e.g. 0.1 for +/-10%.
    pub max_scale: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flips: true,
            rotate90: true,
            noise_sigma: 0.2,
            affine: true,
            max_rotation_deg: 30.0,
            max_scale: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flips: false,
            rotate90: false,
            noise_sigma: 0.0,
            affine: false,
            max_rotation_deg: 0.0,
            max_scale: 0.0,
        }
    }

    fn is_identity(&self) -> bool {
        !self.flips && !self.rotate90 && self.noise_sigma == 0.0 && !self.affine
    }
}

/// Flip one spatial axis (0 = D, 1 = H, 2 = W) of a [1, D, H, W] volume.
pub fn flip_axis(v: &Tensor<f32>, axis: usize) -> Tensor<f32> {
    let s = v.shape().to_vec();
    let (d, h, w) = (s[1], s[2], s[3]);
    Tensor::from_fn(s.clone(), |i| {
        let wi = i % w;
        let hi = (i / w) % h;
        let di = (i / (w * h)) % d;
        let (di, hi, wi) = match axis {
            0 => (d - 1 - di, hi, wi),
            1 => (di, h - 1 - hi, wi),
            _ => (di, hi, w - 1 - wi),
        };
        v.data()[(di * h + hi) * w + wi]
    })
}

/// Rotate 90 degrees in the plane of two spatial axes (k quarter turns).
/// Requires the two axes to have equal extents.
pub fn rot90(v: &Tensor<f32>, axes: (usize, usize), k: usize) -> Tensor<f32> {
    let mut out = v.clone();
    for _ in 0..(k % 4) {
        out = rot90_once(&out, axes);
    }
    out
}

fn rot90_once(v: &Tensor<f32>, axes: (usize, usize)) -> Tensor<f32> {
    let s = v.shape().to_vec();
    let (d, h, w) = (s[1], s[2], s[3]);
    let n = [d, h, w];
    let (a, b) = axes;
    debug_assert_eq!(n[a], n[b], "rot90 requires square axes");
    Tensor::from_fn(s, |i| {
        let wi = i % w;
        let hi = (i / w) % h;
        let di = (i / (w * h)) % d;
        let mut idx = [di, hi, wi];
        // destination (ia, ib) reads source (ib, N-1-ia)
        let (ia, ib) = (idx[a], idx[b]);
        idx[a] = ib;
        idx[b] = n[a] - 1 - ia;
        v.data()[(idx[0] * h + idx[1]) * w + idx[2]]
    })
}

fn flip_mask(mask: &[bool], shape: &[usize], axis: usize) -> Vec<bool> {
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    (0..mask.len())
        .map(|i| {
            let wi = i % w;
            let hi = (i / w) % h;
            let di = (i / (w * h)) % d;
            let (di, hi, wi) = match axis {
                0 => (d - 1 - di, hi, wi),
                1 => (di, h - 1 - hi, wi),
                _ => (di, hi, w - 1 - wi),
            };
            mask[(di * h + hi) * w + wi]
        })
        .collect()
}

fn rot90_mask(mask: &[bool], shape: &[usize], axes: (usize, usize), k: usize) -> Vec<bool> {
    let as_tensor = Tensor::from_fn(shape.to_vec(), |i| if mask[i] { 1.0 } else { 0.0 });
    let rotated = rot90(&as_tensor, axes, k);
    rotated.data().iter().map(|&v| v > 0.5).collect()
}

/// Row-major 3x3 rotation from Euler angles (radians) around D, H, W axes.
fn rotation_matrix(ad: f32, ah: f32, aw: f32) -> [[f32; 3]; 3] {
    let (cd, sd) = (ad.cos(), ad.sin());
    let (ch, sh) = (ah.cos(), ah.sin());
    let (cw, sw) = (aw.cos(), aw.sin());
    // R = Rd * Rh * Rw acting on (d, h, w) coordinates
    let rd = [[1.0, 0.0, 0.0], [0.0, cd, -sd], [0.0, sd, cd]];
    let rh = [[ch, 0.0, sh], [0.0, 1.0, 0.0], [-sh, 0.0, ch]];
    let rw = [[cw, -sw, 0.0], [sw, cw, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f32; 3]; 3], b: [[f32; 3]; 3]| {
        let mut c = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    };
    mul(mul(rd, rh), rw)
}

/// Trilinear sample with coordinate clamping (edge replication out of field).
fn sample_trilinear(v: &Tensor<f32>, d: f32, h: f32, w: f32) -> f32 {
    let s = v.shape();
    let (nd, nh, nw) = (s[1], s[2], s[3]);
    let cl = |x: f32, n: usize| x.clamp(0.0, (n - 1) as f32);
    let (d, h, w) = (cl(d, nd), cl(h, nh), cl(w, nw));
    let (d0, h0, w0) = (d.floor() as usize, h.floor() as usize, w.floor() as usize);
    let (d1, h1, w1) = ((d0 + 1).min(nd - 1), (h0 + 1).min(nh - 1), (w0 + 1).min(nw - 1));
    let (fd, fh, fw) = (d - d0 as f32, h - h0 as f32, w - w0 as f32);
    let at = |di: usize, hi: usize, wi: usize| v.data()[(di * nh + hi) * nw + wi];
    let c00 = at(d0, h0, w0) * (1.0 - fw) + at(d0, h0, w1) * fw;
    let c01 = at(d0, h1, w0) * (1.0 - fw) + at(d0, h1, w1) * fw;
    let c10 = at(d1, h0, w0) * (1.0 - fw) + at(d1, h0, w1) * fw;
    let c11 = at(d1, h1, w0) * (1.0 - fw) + at(d1, h1, w1) * fw;
    let c0 = c00 * (1.0 - fh) + c01 * fh;
    let c1 = c10 * (1.0 - fh) + c11 * fh;
    c0 * (1.0 - fd) + c1 * fd
}

fn affine_resample(v: &Tensor<f32>, rot: &[[f32; 3]; 3], scale: f32, nearest: bool) -> Tensor<f32> {
    let s = v.shape().to_vec();
    let (nd, nh, nw) = (s[1], s[2], s[3]);
    let c = [(nd as f32 - 1.0) / 2.0, (nh as f32 - 1.0) / 2.0, (nw as f32 - 1.0) / 2.0];
    // map output voxel back to source: rot is orthogonal, inverse = transpose / scale
    Tensor::from_fn(s.clone(), |i| {
        let wi = (i % nw) as f32;
        let hi = ((i / nw) % nh) as f32;
        let di = ((i / (nw * nh)) % nd) as f32;
        let p = [di - c[0], hi - c[1], wi - c[2]];
        let mut src = [0.0f32; 3];
        for a in 0..3 {
            // transpose of rot
            src[a] = (rot[0][a] * p[0] + rot[1][a] * p[1] + rot[2][a] * p[2]) / scale + c[a];
        }
        if nearest {
            let di = src[0].round().clamp(0.0, (nd - 1) as f32) as usize;
            let hi = src[1].round().clamp(0.0, (nh - 1) as f32) as usize;
            let wi = src[2].round().clamp(0.0, (nw - 1) as f32) as usize;
            v.data()[(di * nh + hi) * nw + wi]
        } else {
            sample_trilinear(v, src[0], src[1], src[2])
        }
    })
}

/// Apply one random augmentation draw to every contrast of a sample.
/// Deterministic for a fixed RNG state; identity when everything is disabled.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    if cfg.is_identity() {
        return sample.clone();
    }
    let mut volumes = sample.volumes.clone();
    let shape = volumes[0].shape().to_vec();
    let mut mask = sample.brain_mask.clone();

    if cfg.flips {
        for axis in 0..3 {
            if rng.gen_bool(0.5) {
                for v in &mut volumes {
                    *v = flip_axis(v, axis);
                }
                mask = flip_mask(&mask, &shape, axis);
            }
        }
    }
    if cfg.rotate90 {
        let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
        let extents = [shape[1], shape[2], shape[3]];
        let square: Vec<(usize, usize)> =
            pairs.iter().copied().filter(|&(a, b)| extents[a] == extents[b]).collect();
        if !square.is_empty() {
            let axes = square[rng.gen_range(0..square.len())];
            let k = rng.gen_range(0..4usize);
            if k > 0 {
                for v in &mut volumes {
                    *v = rot90(v, axes, k);
                }
                mask = rot90_mask(&mask, &shape, axes, k);
            }
        }
    }
    if cfg.affine {
        let max_r = cfg.max_rotation_deg.to_radians();
        let ang = [
            rng.gen_range(-max_r..=max_r),
            rng.gen_range(-max_r..=max_r),
            rng.gen_range(-max_r..=max_r),
        ];
        let scale = 1.0 + rng.gen_range(-cfg.max_scale..=cfg.max_scale);
        let rot = rotation_matrix(ang[0], ang[1], ang[2]);
        for v in &mut volumes {
            *v = affine_resample(v, &rot, scale, false);
        }
        let mask_t = Tensor::from_fn(shape.clone(), |i| if mask[i] { 1.0 } else { 0.0 });
        let mask_r = affine_resample(&mask_t, &rot, scale, true);
        mask = mask_r.data().iter().map(|&v| v > 0.5).collect();
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma).expect("sigma validated positive");
        for v in &mut volumes {
            for x in v.data_mut() {
                *x += normal.sample(rng);
            }
        }
    }
    for v in &mut volumes {
        for x in v.data_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    }
    Sample { volumes, brain_mask: mask, ..sample.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_sample(seed: u64) -> Sample {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let vols = (0..2)
            .map(|_| Tensor::from_fn(vec![1, 6, 6, 6], |_| rng.gen_range(0.0..1.0f32)))
            .collect();
        Sample::new(1, 0, vols, vec![true; 216], 45.0, 6.5).unwrap()
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = toy_sample(1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let out = augment(&s, &AugmentConfig::disabled(), &mut rng);
        for (a, b) in out.volumes.iter().zip(&s.volumes) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = toy_sample(3);
        let cfg = AugmentConfig::default();
        let a = augment(&s, &cfg, &mut ChaCha20Rng::seed_from_u64(7));
        let b = augment(&s, &cfg, &mut ChaCha20Rng::seed_from_u64(7));
        for (x, y) in a.volumes.iter().zip(&b.volumes) {
            assert_eq!(x, y);
        }
    }

    /// Composing two same-axis quarter turns equals one half turn, which is
    /// itself the composition of flips along both axes.
    #[test]
    fn two_quarter_turns_equal_half_turn() {
        let s = toy_sample(5);
        let v = &s.volumes[0];
        for &axes in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let twice = rot90(&rot90(v, axes, 1), axes, 1);
            let half = rot90(v, axes, 2);
            assert_eq!(twice, half);
            // index-permutation oracle: 180 degrees flips both axes of the plane
            let oracle = flip_axis(&flip_axis(v, axes.0), axes.1);
            assert_eq!(half, oracle);
        }
    }

    #[test]
    fn lossless_transforms_preserve_voxel_multiset() {
        let s = toy_sample(8);
        let v = &s.volumes[0];
        let mut orig: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        orig.sort_unstable();
        for t in [flip_axis(v, 1), rot90(v, (0, 2), 1), rot90(v, (1, 2), 3)] {
            let mut got: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            got.sort_unstable();
            assert_eq!(got, orig);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let s = toy_sample(9);
        let cfg = AugmentConfig::default();
        for seed in 0..10 {
            let out = augment(&s, &cfg, &mut ChaCha20Rng::seed_from_u64(seed));
            for v in &out.volumes {
                assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
