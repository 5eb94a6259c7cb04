//! Forward execution: a traced walk for inference and relevance propagation,
//! and a recorded-graph walk for training and gradient-based attribution.
//!
//! Both walks call the same kernels in the same order, so their outputs are
//! bit-identical for identical inputs and parameters.

use super::{AttentionParams, EncoderParams, NetworkParams, NormAct};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::ops::{self, nn};
use crate::tensor::{Scalar, Tensor};

/// Per-path activations retained for the relevance backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// The path's input volume [1, D, H, W].
    pub input: Tensor<f32>,
    /// Input to the stem max pool (post stem norm + ReLU).
    pub stem_pool_in: Tensor<f32>,
    /// Winner index per pooled element.
    pub stem_pool_argmax: Vec<u32>,
    /// Per block, per dense layer: input to the 1x1x1 conv (post act1).
    pub conv1_in: Vec<Vec<Tensor<f32>>>,
    /// Per block, per dense layer: input to the 3x3x3 conv (post act2).
    pub conv2_in: Vec<Vec<Tensor<f32>>>,
    /// Per transition: input to the 1x1x1 conv (post act).
    pub trans_conv_in: Vec<Tensor<f32>>,
    /// Per transition: input to the average pool (conv output).
    pub trans_pool_in: Vec<Tensor<f32>>,
    /// Flattened input to the head FC (post head act).
    pub head_fc_in: Tensor<f32>,
    /// The path's hidden vector m_l.
    pub hidden: Vec<f32>,
}

/// Attention internals retained for relevance propagation.
#[derive(Clone, Debug)]
pub struct AttentionInternals {
    /// Signal branch outputs s_l = tanh(U m_l + b_u), one K-vector per path.
    pub signal: Vec<Vec<f32>>,
    /// Gate branch outputs g_l = sigm(V m_l + b_v).
    pub gate: Vec<Vec<f32>>,
    /// Elementwise products h_l = s_l ⊙ g_l.
    pub prod: Vec<Vec<f32>>,
    /// Pre-softmax scores e_l = w h_l + b_w.
    pub scores: Vec<f32>,
    /// Attention weights a = softmax(e).
    pub weights: Vec<f32>,
    /// Pooled representation n = Σ a_l m_l.
    pub pooled: Vec<f32>,
}

/// Everything recorded during one forward pass, sufficient to replay it
/// bit-exactly and to run the relevance backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub encoders: Vec<EncoderTrace>,
    pub attention: AttentionInternals,
    /// age / age_divisor, as concatenated to the pooled vector.
    pub age_feature: f32,
    /// Classifier input [n; age_feature].
    pub classifier_in: Vec<f32>,
    pub logit: f32,
    pub probability: f32,
    /// Fingerprint of the parameters that produced this trace.
    pub params_fingerprint: u64,
}

pub struct ForwardOutput {
    pub probability: f32,
    pub logit: f32,
    pub trace: ForwardTrace,
}

fn apply_norm_act(na: &NormAct<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    match na {
        NormAct::Bn(bn) => {
            let y = nn::batchnorm_eval(
                x,
                bn.gamma.data(),
                bn.beta.data(),
                &bn.running_mean,
                &bn.running_var,
                bn.eps,
            )?;
            Ok(ops::relu(&y))
        }
        NormAct::Shifted { scale, shift } => Ok(nn::shifted_relu(x, scale, shift)),
        NormAct::Relu => Ok(ops::relu(x)),
    }
}

fn encode_traced(enc: &EncoderParams<f32>, x: &Tensor<f32>) -> Result<(Vec<f32>, EncoderTrace)> {
    let input = x.clone();
    let mut y = ops::conv3d(
        x,
        &enc.stem_conv.weight,
        Some(enc.stem_conv.bias.data()),
        enc.stem_conv.stride,
        enc.stem_conv.pad,
        enc.stem_conv.mode,
    )?;
    if let Some(bn) = &enc.stem_bn {
        y = nn::batchnorm_eval(
            &y,
            bn.gamma.data(),
            bn.beta.data(),
            &bn.running_mean,
            &bn.running_var,
            bn.eps,
        )?;
    }
    let stem_pool_in = ops::relu(&y);
    let (mut feat, stem_pool_argmax) = ops::maxpool3d(&stem_pool_in, 3, 2, 1)?;

    let mut conv1_in = Vec::with_capacity(enc.blocks.len());
    let mut conv2_in = Vec::with_capacity(enc.blocks.len());
    let mut trans_conv_in = Vec::new();
    let mut trans_pool_in = Vec::new();
    for (b, block) in enc.blocks.iter().enumerate() {
        let mut c1s = Vec::with_capacity(block.len());
        let mut c2s = Vec::with_capacity(block.len());
        for layer in block {
            let a1 = apply_norm_act(&layer.act1, &feat)?;
            let y1 = ops::conv3d(
                &a1,
                &layer.conv1.weight,
                Some(layer.conv1.bias.data()),
                layer.conv1.stride,
                layer.conv1.pad,
                layer.conv1.mode,
            )?;
            let a2 = apply_norm_act(&layer.act2, &y1)?;
            let y2 = ops::conv3d(
                &a2,
                &layer.conv2.weight,
                Some(layer.conv2.bias.data()),
                layer.conv2.stride,
                layer.conv2.pad,
                layer.conv2.mode,
            )?;
            feat = nn::concat_channels(&[&feat, &y2])?;
            c1s.push(a1);
            c2s.push(a2);
        }
        conv1_in.push(c1s);
        conv2_in.push(c2s);
        if b < enc.transitions.len() {
            let t = &enc.transitions[b];
            let a = apply_norm_act(&t.act, &feat)?;
            let y = ops::conv3d(
                &a,
                &t.conv.weight,
                Some(t.conv.bias.data()),
                t.conv.stride,
                t.conv.pad,
                t.conv.mode,
            )?;
            feat = ops::avgpool3d(&y, 2, 2)?;
            trans_conv_in.push(a);
            trans_pool_in.push(y);
        }
    }
    let a = apply_norm_act(&enc.head_act, &feat)?;
    let n = a.len();
    let head_fc_in = a.reshaped(vec![n])?;
    let m = nn::linear(&enc.head_fc.weight, &head_fc_in, Some(enc.head_fc.bias.data()))?;
    let hidden = m.into_data();
    Ok((
        hidden.clone(),
        EncoderTrace {
            input,
            stem_pool_in,
            stem_pool_argmax,
            conv1_in,
            conv2_in,
            trans_conv_in,
            trans_pool_in,
            head_fc_in,
            hidden,
        },
    ))
}

/// Gated-attention pooling over per-path hidden vectors.
///
/// s = tanh(U m_l), g = sigm(V m_l), a = softmax over w (s ⊙ g), and the
/// pooled vector n = Σ a_l m_l. Rejects non-finite inputs.
pub fn gated_attention(
    hidden: &[Vec<f32>],
    attn: &AttentionParams<f32>,
) -> Result<(Vec<f32>, Vec<f32>, AttentionInternals)> {
    if hidden.is_empty() {
        return Err(Error::Data("gated_attention: need at least one path".into()));
    }
    let m_len = hidden[0].len();
    let mut signal = Vec::with_capacity(hidden.len());
    let mut gate = Vec::with_capacity(hidden.len());
    let mut prod = Vec::with_capacity(hidden.len());
    let mut scores = Vec::with_capacity(hidden.len());
    for m in hidden {
        if m.len() != m_len {
            return Err(Error::shape("gated_attention", "hidden vectors differ in length"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("gated_attention", "non-finite hidden vector"));
        }
        let mt = Tensor::new(vec![m_len], m.clone())?;
        let s_pre = nn::linear(&attn.u.weight, &mt, Some(attn.u.bias.data()))?;
        let g_pre = nn::linear(&attn.v.weight, &mt, Some(attn.v.bias.data()))?;
        let s: Vec<f32> = s_pre.data().iter().map(|&v| v.tanh()).collect();
        let g: Vec<f32> = g_pre.data().iter().map(|&v| nn::sigmoid_scalar(v)).collect();
        let h: Vec<f32> = s.iter().zip(&g).map(|(&a, &b)| a * b).collect();
        let ht = Tensor::new(vec![h.len()], h.clone())?;
        let e = nn::linear(&attn.w.weight, &ht, Some(attn.w.bias.data()))?;
        scores.push(e.data()[0]);
        signal.push(s);
        gate.push(g);
        prod.push(h);
    }
    let weights = nn::softmax(&scores);
    let mut pooled = vec![0.0f32; m_len];
    for (a, m) in weights.iter().zip(hidden) {
        for (acc, &v) in pooled.iter_mut().zip(m) {
            *acc += a * v;
        }
    }
    let internals =
        AttentionInternals { signal, gate, prod, scores, weights: weights.clone(), pooled: pooled.clone() };
    Ok((weights, pooled, internals))
}

/// Full forward pass with trace: encoders, attention, age concat, classifier.
pub fn forward(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age_years: f32,
) -> Result<ForwardOutput> {
    let spec = &params.spec;
    if volumes.len() != spec.paths {
        return Err(Error::Data(format!(
            "forward: expected {} input volumes, got {}",
            spec.paths,
            volumes.len()
        )));
    }
    let want = [1, spec.input_extents[0], spec.input_extents[1], spec.input_extents[2]];
    for v in volumes {
        if v.shape() != want {
            return Err(Error::shape(
                "forward",
                format!("volume shape {:?}, spec requires {:?}", v.shape(), want),
            ));
        }
    }
    if !(age_years >= 0.0) {
        return Err(Error::Data(format!("forward: age must be >= 0, got {}", age_years)));
    }
    let mut hidden = Vec::with_capacity(spec.paths);
    let mut traces = Vec::with_capacity(spec.paths);
    for (enc, vol) in params.encoders.iter().zip(volumes) {
        let (m, t) = encode_traced(enc, vol)?;
        hidden.push(m);
        traces.push(t);
    }
    let (_, pooled, internals) = gated_attention(&hidden, &params.attention)?;
    let age_feature = age_years / spec.age_divisor;
    let mut classifier_in = pooled.clone();
    classifier_in.push(age_feature);
    let cin = Tensor::new(vec![classifier_in.len()], classifier_in.clone())?;
    let logit =
        nn::linear(&params.classifier.weight, &cin, Some(params.classifier.bias.data()))?.data()[0];
    let probability = nn::sigmoid_scalar(logit);
    Ok(ForwardOutput {
        probability,
        logit,
        trace: ForwardTrace {
            encoders: traces,
            attention: internals,
            age_feature,
            classifier_in,
            logit,
            probability,
            params_fingerprint: params.fingerprint(),
        },
    })
}

/// Batch-norm semantics for the recorded walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics from this sample's spatial extent; enables stat updates.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Node handles exposed by the recorded walk.
pub struct TapeRefs {
    /// Input volume leaves, one per path.
    pub inputs: Vec<NodeId>,
    /// Trainable parameter leaves in `for_each_trainable` order.
    pub params: Vec<NodeId>,
    /// Training-mode batch-norm nodes in `for_each_bn_mut` order.
    pub bn_nodes: Vec<NodeId>,
    /// Pre-softmax attention scores [L].
    pub scores: NodeId,
    /// Attention weights a = softmax(scores).
    pub attn: NodeId,
    /// Classifier logit (scalar).
    pub logit: NodeId,
    /// Classification probability (scalar).
    pub prob: NodeId,
}

/// Record the full forward pass on a tape. `train_params` controls whether
/// parameter leaves track gradients; input leaves always do.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &NetworkParams<T>,
    volumes: &[Tensor<T>],
    age_years: T,
    mode: BnMode,
    train_params: bool,
) -> Result<TapeRefs> {
    let spec = &params.spec;
    if volumes.len() != spec.paths {
        return Err(Error::Data(format!(
            "forward_tape: expected {} input volumes, got {}",
            spec.paths,
            volumes.len()
        )));
    }
    let mut param_ids = Vec::new();
    let mut bn_nodes = Vec::new();
    let mut input_ids = Vec::with_capacity(spec.paths);
    let mut hidden_ids = Vec::with_capacity(spec.paths);

    for (enc, vol) in params.encoders.iter().zip(volumes) {
        let x = tape.leaf(vol.clone(), true);
        input_ids.push(x);
        // stem conv
        let w = tape.leaf(enc.stem_conv.weight.clone(), train_params);
        let b = tape.leaf(enc.stem_conv.bias.clone(), train_params);
        param_ids.push(w);
        param_ids.push(b);
        let mut y = tape.conv3d(
            x,
            w,
            Some(b),
            enc.stem_conv.stride,
            enc.stem_conv.pad,
            enc.stem_conv.mode,
        )?;
        if let Some(bn) = &enc.stem_bn {
            let g = tape.leaf(bn.gamma.clone(), train_params);
            let be = tape.leaf(bn.beta.clone(), train_params);
            param_ids.push(g);
            param_ids.push(be);
            y = match mode {
                BnMode::Train => {
                    let id = tape.batchnorm_train(y, g, be, bn.eps)?;
                    bn_nodes.push(id);
                    id
                }
                BnMode::Eval => tape.batchnorm_eval(
                    y,
                    g,
                    be,
                    bn.running_mean.clone(),
                    bn.running_var.clone(),
                    bn.eps,
                )?,
            };
        }
        y = tape.relu(y);
        let mut feat = tape.maxpool(y, 3, 2, 1)?;

        let norm_act = |tape: &mut Tape<T>,
                            na: &NormAct<T>,
                            x: NodeId,
                            param_ids: &mut Vec<NodeId>,
                            bn_nodes: &mut Vec<NodeId>|
         -> Result<NodeId> {
            match na {
                NormAct::Bn(bn) => {
                    let g = tape.leaf(bn.gamma.clone(), train_params);
                    let be = tape.leaf(bn.beta.clone(), train_params);
                    param_ids.push(g);
                    param_ids.push(be);
                    let y = match mode {
                        BnMode::Train => {
                            let id = tape.batchnorm_train(x, g, be, bn.eps)?;
                            bn_nodes.push(id);
                            id
                        }
                        BnMode::Eval => tape.batchnorm_eval(
                            x,
                            g,
                            be,
                            bn.running_mean.clone(),
                            bn.running_var.clone(),
                            bn.eps,
                        )?,
                    };
                    Ok(tape.relu(y))
                }
                NormAct::Shifted { scale, shift } => {
                    Ok(tape.shifted_relu(x, scale.clone(), shift.clone()))
                }
                NormAct::Relu => Ok(tape.relu(x)),
            }
        };

        for (bi, block) in enc.blocks.iter().enumerate() {
            for layer in block {
                let a1 = norm_act(tape, &layer.act1, feat, &mut param_ids, &mut bn_nodes)?;
                let w1 = tape.leaf(layer.conv1.weight.clone(), train_params);
                let b1 = tape.leaf(layer.conv1.bias.clone(), train_params);
                param_ids.push(w1);
                param_ids.push(b1);
                let y1 = tape.conv3d(
                    a1,
                    w1,
                    Some(b1),
                    layer.conv1.stride,
                    layer.conv1.pad,
                    layer.conv1.mode,
                )?;
                let a2 = norm_act(tape, &layer.act2, y1, &mut param_ids, &mut bn_nodes)?;
                let w2 = tape.leaf(layer.conv2.weight.clone(), train_params);
                let b2 = tape.leaf(layer.conv2.bias.clone(), train_params);
                param_ids.push(w2);
                param_ids.push(b2);
                let y2 = tape.conv3d(
                    a2,
                    w2,
                    Some(b2),
                    layer.conv2.stride,
                    layer.conv2.pad,
                    layer.conv2.mode,
                )?;
                feat = tape.concat(&[feat, y2])?;
            }
            if bi < enc.transitions.len() {
                let t = &enc.transitions[bi];
                let a = norm_act(tape, &t.act, feat, &mut param_ids, &mut bn_nodes)?;
                let w = tape.leaf(t.conv.weight.clone(), train_params);
                let b = tape.leaf(t.conv.bias.clone(), train_params);
                param_ids.push(w);
                param_ids.push(b);
                let y =
                    tape.conv3d(a, w, Some(b), t.conv.stride, t.conv.pad, t.conv.mode)?;
                feat = tape.avgpool(y, 2, 2)?;
            }
        }
        let a = norm_act(tape, &enc.head_act, feat, &mut param_ids, &mut bn_nodes)?;
        let hw = tape.leaf(enc.head_fc.weight.clone(), train_params);
        let hb = tape.leaf(enc.head_fc.bias.clone(), train_params);
        param_ids.push(hw);
        param_ids.push(hb);
        let m = tape.linear(a, hw, Some(hb))?;
        hidden_ids.push(m);
    }

    // shared attention
    let uw = tape.leaf(params.attention.u.weight.clone(), train_params);
    let ub = tape.leaf(params.attention.u.bias.clone(), train_params);
    let vw = tape.leaf(params.attention.v.weight.clone(), train_params);
    let vb = tape.leaf(params.attention.v.bias.clone(), train_params);
    let ww = tape.leaf(params.attention.w.weight.clone(), train_params);
    let wb = tape.leaf(params.attention.w.bias.clone(), train_params);
    param_ids.extend([uw, ub, vw, vb, ww, wb]);
    let mut score_ids = Vec::with_capacity(hidden_ids.len());
    for &m in &hidden_ids {
        let s_pre = tape.linear(m, uw, Some(ub))?;
        let s = tape.tanh(s_pre);
        let g_pre = tape.linear(m, vw, Some(vb))?;
        let g = tape.sigmoid(g_pre);
        let h = tape.mul(s, g)?;
        let e = tape.linear(h, ww, Some(wb))?;
        score_ids.push(e);
    }
    let scores = tape.concat(&score_ids)?;
    let attn = tape.softmax(scores);
    let mut pooled: Option<NodeId> = None;
    for (l, &m) in hidden_ids.iter().enumerate() {
        let a_l = tape.pick(attn, l)?;
        let term = tape.scale_vec(a_l, m)?;
        pooled = Some(match pooled {
            None => term,
            Some(p) => tape.add(p, term)?,
        });
    }
    let pooled = pooled.expect("at least one path");
    let age = tape.leaf(
        Tensor::new(vec![1], vec![age_years / T::of_f64(spec.age_divisor as f64)])?,
        false,
    );
    let cin = tape.concat(&[pooled, age])?;
    let cw = tape.leaf(params.classifier.weight.clone(), train_params);
    let cb = tape.leaf(params.classifier.bias.clone(), train_params);
    param_ids.push(cw);
    param_ids.push(cb);
    let logit = tape.linear(cin, cw, Some(cb))?;
    let prob = tape.sigmoid(logit);
    Ok(TapeRefs { inputs: input_ids, params: param_ids, bn_nodes, scores, attn, logit, prob })
}
