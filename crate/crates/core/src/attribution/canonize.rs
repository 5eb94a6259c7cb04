//! Fold batch normalization out of the network before relevance propagation.
//!
//! Two rewrites, both exact in real arithmetic:
//!  - Conv followed directly by BN: the per-channel affine folds into the
//!    conv kernel and bias (stem conv, and the 1x1x1 conv whose BN follows it
//!    inside each dense layer).
//!  - BN followed by ReLU then a linear layer: the frozen affine moves into
//!    the activation as relu(scale * x + shift); the shift is bias-like and
//!    therefore invisible to the (bias-free) relevance rules, and the scale
//!    multiplies into the very contributions z = w * x the next layer's rule
//!    uses, so relevance is unchanged versus a weight-side fold.

use crate::error::{Error, Result};
use crate::net::{BnLayer, ConvLayer, NetworkParams, NormAct};
use crate::tensor::Scalar;

fn affine_of<T: Scalar>(bn: &BnLayer<T>) -> Result<(Vec<T>, Vec<T>)> {
    let c = bn.gamma.len();
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for i in 0..c {
        let var = bn.running_var[i];
        if var <= T::zero() {
            return Err(Error::numeric(
                "canonize",
                format!("batch-norm channel {} has variance {:?} <= 0", i, var.as_f64()),
            ));
        }
        let a = bn.gamma.data()[i] / (var + bn.eps).sqrt();
        scale.push(a);
        shift.push(bn.beta.data()[i] - bn.running_mean[i] * a);
    }
    Ok((scale, shift))
}

/// Fold a BN that directly follows this conv into its kernel and bias.
fn fold_bn_after_conv<T: Scalar>(conv: &mut ConvLayer<T>, bn: &BnLayer<T>) -> Result<()> {
    let (scale, shift) = affine_of(bn)?;
    let f = conv.weight.shape()[0];
    let per_filter = conv.weight.len() / f;
    for fi in 0..f {
        let s = scale[fi];
        for v in &mut conv.weight.data_mut()[fi * per_filter..(fi + 1) * per_filter] {
            *v = *v * s;
        }
        let b = conv.bias.data()[fi];
        conv.bias.data_mut()[fi] = b * s + shift[fi];
    }
    Ok(())
}

fn shift_act<T: Scalar>(na: &NormAct<T>) -> Result<NormAct<T>> {
    match na {
        NormAct::Bn(bn) => {
            let (scale, shift) = affine_of(bn)?;
            Ok(NormAct::Shifted { scale, shift })
        }
        other => Ok(other.clone()),
    }
}

/// Produce an equivalent network with no batch-norm layers. Idempotent.
pub fn canonize<T: Scalar>(params: &NetworkParams<T>) -> Result<NetworkParams<T>> {
    let mut out = params.clone();
    for enc in &mut out.encoders {
        if let Some(bn) = enc.stem_bn.take() {
            fold_bn_after_conv(&mut enc.stem_conv, &bn)?;
        }
        for block in &mut enc.blocks {
            for layer in block {
                if let NormAct::Bn(bn) = &layer.act2 {
                    let bn = bn.clone();
                    fold_bn_after_conv(&mut layer.conv1, &bn)?;
                    layer.act2 = NormAct::Relu;
                }
                layer.act1 = shift_act(&layer.act1)?;
            }
        }
        for t in &mut enc.transitions {
            t.act = shift_act(&t.act)?;
        }
        enc.head_act = shift_act(&enc.head_act)?;
    }
    out.canonized = true;
    Ok(out)
}
