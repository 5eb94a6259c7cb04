//! Gradient-based attribution baselines: saliency and integrated gradients.

use super::lrp::Anchor;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::net::{forward_tape, BnMode, NetworkParams};
use crate::tensor::Tensor;

/// Forward once on a tape and return (anchor value, d anchor / d input per path).
pub fn anchor_gradients(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
    anchor: Anchor,
) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let refs = forward_tape(&mut tape, params, volumes, age, BnMode::Eval, false)?;
    let root = match anchor {
        Anchor::Logit => refs.logit,
        Anchor::AttentionWeight(l) => {
            if l >= volumes.len() {
                return Err(Error::Config(format!("anchor path {} out of range", l)));
            }
            tape.pick(refs.attn, l)?
        }
    };
    let value = tape.value(root).data()[0];
    tape.backward(root)?;
    let mut grads = Vec::with_capacity(refs.inputs.len());
    for (i, id) in refs.inputs.iter().enumerate() {
        let g = tape
            .grad(*id)
            .ok_or_else(|| Error::numeric("anchor_gradients", "missing input gradient"))?;
        let t = Tensor::new(volumes[i].shape().to_vec(), g.to_vec())?;
        if !t.all_finite() {
            return Err(Error::numeric("anchor_gradients", format!("non-finite gradient on path {}", i)));
        }
        grads.push(t);
    }
    Ok((value, grads))
}

/// Per-path diagonal gradients: for each path l, d a_l / d x_l from a single
/// recorded forward pass.
pub fn attention_diagonal_gradients(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
) -> Result<Vec<Tensor<f32>>> {
    let mut tape = Tape::<f32>::new();
    let refs = forward_tape(&mut tape, params, volumes, age, BnMode::Eval, false)?;
    let mut out = Vec::with_capacity(volumes.len());
    for (l, vol) in volumes.iter().enumerate() {
        let root = tape.pick(refs.attn, l)?;
        tape.backward(root)?;
        let g = tape
            .grad(refs.inputs[l])
            .ok_or_else(|| Error::numeric("attention_gradients", "missing input gradient"))?;
        let t = Tensor::new(vol.shape().to_vec(), g.to_vec())?;
        if !t.all_finite() {
            return Err(Error::numeric("attention_gradients", format!("non-finite gradient on path {}", l)));
        }
        out.push(t);
    }
    Ok(out)
}

/// Absolute gradient of the anchor scalar w.r.t. each input voxel.
pub fn saliency(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
    anchor: Anchor,
) -> Result<Vec<Tensor<f32>>> {
    let (_, grads) = anchor_gradients(params, volumes, age, anchor)?;
    Ok(grads.into_iter().map(|g| g.map(|v| v.abs())).collect())
}

/// Riemann-sum path integral of gradients from a baseline to the input,
/// scaled by (input - baseline). Default baseline is all zeros; midpoint rule.
pub fn integrated_gradients(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
    anchor: Anchor,
    steps: usize,
    baseline: Option<&[Tensor<f32>]>,
) -> Result<Vec<Tensor<f32>>> {
    if steps < 1 {
        return Err(Error::Config("integrated_gradients: steps must be >= 1".into()));
    }
    let zeros: Vec<Tensor<f32>>;
    let base: &[Tensor<f32>] = match baseline {
        Some(b) => {
            if b.len() != volumes.len() {
                return Err(Error::Data("integrated_gradients: baseline path count mismatch".into()));
            }
            for (bb, v) in b.iter().zip(volumes) {
                if bb.shape() != v.shape() {
                    return Err(Error::shape(
                        "integrated_gradients",
                        format!("baseline {:?} vs input {:?}", bb.shape(), v.shape()),
                    ));
                }
            }
            b
        }
        None => {
            zeros = volumes.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
            &zeros
        }
    };
    let mut acc: Vec<Tensor<f32>> =
        volumes.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
    for k in 0..steps {
        let t = (k as f32 + 0.5) / steps as f32;
        let interp: Vec<Tensor<f32>> = volumes
            .iter()
            .zip(base)
            .map(|(v, b)| {
                Tensor::from_fn(v.shape().to_vec(), |i| {
                    b.data()[i] + t * (v.data()[i] - b.data()[i])
                })
            })
            .collect();
        let (_, grads) = anchor_gradients(params, &interp, age, anchor)?;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for i in 0..a.len() {
                a.data_mut()[i] += g.data()[i];
            }
        }
    }
    let inv = 1.0 / steps as f32;
    Ok(acc
        .into_iter()
        .zip(volumes.iter().zip(base))
        .map(|(a, (v, b))| {
            Tensor::from_fn(v.shape().to_vec(), |i| {
                (v.data()[i] - b.data()[i]) * a.data()[i] * inv
            })
        })
        .collect())
}

/// Integrated gradients where each path's map is anchored at its own
/// attention weight: map_l = (x_l - b_l) * mean_t d a_l / d x_l.
pub fn integrated_gradients_attention(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
    steps: usize,
    baseline: Option<&[Tensor<f32>]>,
) -> Result<Vec<Tensor<f32>>> {
    if steps < 1 {
        return Err(Error::Config("integrated_gradients: steps must be >= 1".into()));
    }
    let zeros: Vec<Tensor<f32>>;
    let base: &[Tensor<f32>] = match baseline {
        Some(b) => b,
        None => {
            zeros = volumes.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
            &zeros
        }
    };
    let mut acc: Vec<Tensor<f32>> =
        volumes.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
    for k in 0..steps {
        let t = (k as f32 + 0.5) / steps as f32;
        let interp: Vec<Tensor<f32>> = volumes
            .iter()
            .zip(base)
            .map(|(v, b)| {
                Tensor::from_fn(v.shape().to_vec(), |i| {
                    b.data()[i] + t * (v.data()[i] - b.data()[i])
                })
            })
            .collect();
        let grads = attention_diagonal_gradients(params, &interp, age)?;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for i in 0..a.len() {
                a.data_mut()[i] += g.data()[i];
            }
        }
    }
    let inv = 1.0 / steps as f32;
    Ok(acc
        .into_iter()
        .zip(volumes.iter().zip(base))
        .map(|(a, (v, b))| {
            Tensor::from_fn(v.shape().to_vec(), |i| {
                (v.data()[i] - b.data()[i]) * a.data()[i] * inv
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use crate::net::{build, forward, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear model f = w . x on a bare tape: |gradient| is |w| and the
    /// integrated-gradients closed form holds for any step count.
    #[test]
    fn linear_model_closed_forms() {
        let w = [0.5f32, -1.5, 2.0];
        let x = [0.3f32, 0.7, -0.2];
        let mut tape = Tape::<f32>::new();
        let xid = tape.leaf(Tensor::new(vec![3], x.to_vec()).unwrap(), true);
        let wid = tape.leaf(Tensor::new(vec![1, 3], w.to_vec()).unwrap(), false);
        let y = tape.linear(xid, wid, None).unwrap();
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        let g = tape.grad(xid).unwrap();
        for i in 0..3 {
            assert!((g[i].abs() - w[i].abs()).abs() < 1e-7);
        }
        // IG with zero baseline on a linear f: map_i = w_i * x_i, any steps
        for steps in [1usize, 3, 17] {
            let mut acc = [0.0f32; 3];
            for k in 0..steps {
                let _t = (k as f32 + 0.5) / steps as f32;
                // gradient of linear f is constant in the interpolation point
                for i in 0..3 {
                    acc[i] += w[i];
                }
            }
            for i in 0..3 {
                let map = x[i] * acc[i] / steps as f32;
                assert!((map - w[i] * x[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_model_zero_saliency() {
        let spec = NetworkSpec::micro();
        let mut p = build(&spec, 50).unwrap();
        // zero classifier weight makes f(x) constant in the inputs
        p.classifier.weight = Tensor::zeros(vec![1, spec.hidden_width + 1]);
        let [d, h, w] = spec.input_extents;
        let vols: Vec<Tensor<f32>> =
            (0..spec.paths).map(|_| Tensor::full(vec![1, d, h, w], 0.5)).collect();
        let maps = saliency(&p, &vols, 30.0, Anchor::Logit).unwrap();
        for m in maps {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn input_equal_to_baseline_gives_zero_map() {
        let spec = NetworkSpec::micro();
        let p = build(&spec, 51).unwrap();
        let [d, h, w] = spec.input_extents;
        let vols: Vec<Tensor<f32>> =
            (0..spec.paths).map(|_| Tensor::full(vec![1, d, h, w], 0.25)).collect();
        let maps =
            integrated_gradients(&p, &vols, 40.0, Anchor::Logit, 4, Some(&vols.clone())).unwrap();
        for m in maps {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    /// Completeness on the micro-net: the attribution sum approximates
    /// f(x) - f(baseline).
    #[test]
    fn integrated_gradients_completeness() {
        let spec = NetworkSpec::micro();
        let p = build(&spec, 52).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [d, h, w] = spec.input_extents;
        let vols: Vec<Tensor<f32>> = (0..spec.paths)
            .map(|_| Tensor::from_fn(vec![1, d, h, w], |_| rng.gen_range(0.0..1.0)))
            .collect();
        let age = 55.0;
        let zero_vols: Vec<Tensor<f32>> =
            vols.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
        let fx = forward(&p, &vols, age).unwrap().logit;
        let f0 = forward(&p, &zero_vols, age).unwrap().logit;
        let maps = integrated_gradients(&p, &vols, age, Anchor::Logit, 256, None).unwrap();
        let total: f64 = maps.iter().map(|m| m.data().iter().map(|&v| v as f64).sum::<f64>()).sum();
        let rel = (total - (fx - f0) as f64).abs() / ((fx - f0) as f64).abs().max(1e-12);
        assert!(rel <= 1e-3, "completeness residual {}", rel);
    }

    #[test]
    fn saliency_matches_finite_differences_on_micro_net() {
        let spec = NetworkSpec::micro();
        let p = build(&spec, 53).unwrap();
        let p64 = p.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let [d, h, w] = spec.input_extents;
        let vols: Vec<Tensor<f32>> = (0..spec.paths)
            .map(|_| Tensor::from_fn(vec![1, d, h, w], |_| rng.gen_range(0.05..0.95)))
            .collect();
        let age = 45.0;
        let (_, grads) = anchor_gradients(&p, &vols, age, Anchor::Logit).unwrap();
        // spot-check a handful of voxels per path against f64 central differences
        let vols64: Vec<Tensor<f64>> = vols.iter().map(|v| v.cast()).collect();
        let eval = |vs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let refs =
                forward_tape(&mut tape, &p64, vs, age as f64, BnMode::Eval, false).unwrap();
            tape.value(refs.logit).data()[0]
        };
        let hstep = 1e-5;
        for path in 0..spec.paths {
            for &i in &[0usize, 77, 311, 500] {
                let mut up = vols64.clone();
                up[path].data_mut()[i] += hstep;
                let mut dn = vols64.clone();
                dn[path].data_mut()[i] -= hstep;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * hstep);
                let ad = grads[path].data()[i] as f64;
                let rel = (ad - fd).abs() / fd.abs().max(1e-6);
                assert!(rel <= 1e-3, "path {} voxel {}: ad {} fd {}", path, i, ad, fd);
            }
        }
    }
}
