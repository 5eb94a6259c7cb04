//! The relevance-propagation engine: anchor at the classifier logit or at an
//! attention weight, redistribute backward through attention and encoders
//! onto the input voxels, with all bias parameters excluded.

use super::canonize::canonize;
use super::rules::{
    avgpool_redistribute, conv_redistribute, fc_redistribute, maxpool_redistribute,
    redistribute_contributions, split_multiplicative, LinRule, RuleParams, SplitVariant,
};
use crate::error::{Error, Result};
use crate::net::{EncoderParams, EncoderTrace, ForwardTrace, NetworkParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Where the backward pass starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    /// Start from the classifier logit f(x).
    Logit,
    /// Start from one path's attention weight; the softmax is terminal and
    /// the relevance a_l is placed on that path's pre-softmax score.
    AttentionWeight(usize),
}

/// Rule selection and numeric constants for one relevance pass.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    /// Stabilizer for the epsilon rule (added with the denominator's sign).
    pub epsilon: f32,
    pub alpha: f32,
    pub beta: f32,
    pub zbeta_low: f32,
    pub zbeta_high: f32,
    /// Multiplicative-gate split variant.
    pub variant: SplitVariant,
    /// Degenerate-split guard.
    pub delta: f32,
    /// Rule for fully connected layers and the attention-pooling sum.
    pub fc_rule: LinRule,
    /// Rule for convolutions and average pooling.
    pub conv_rule: LinRule,
    /// Rule for the layer reading the input volume.
    pub input_rule: LinRule,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            epsilon: 1e-8,
            alpha: 1.0,
            beta: 0.0,
            zbeta_low: 0.0,
            zbeta_high: 1.0,
            variant: SplitVariant::Proposed,
            delta: 1e-12,
            fc_rule: LinRule::Epsilon,
            conv_rule: LinRule::AlphaBeta,
            input_rule: LinRule::ZBeta,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha - self.beta - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "rules: alpha - beta must be 1, got {} - {}",
                self.alpha, self.beta
            )));
        }
        if self.zbeta_low >= self.zbeta_high {
            return Err(Error::Config("rules: zbeta bounds must satisfy low < high".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("rules: epsilon must be positive".into()));
        }
        Ok(())
    }

    fn params(&self) -> RuleParams<f32> {
        RuleParams {
            epsilon: self.epsilon,
            alpha: self.alpha,
            beta: self.beta,
            zbeta_low: self.zbeta_low,
            zbeta_high: self.zbeta_high,
            delta: self.delta,
        }
    }
}

/// Output of one relevance pass.
#[derive(Clone, Debug)]
pub struct RelevanceBundle {
    /// Per-contrast voxel relevance, same extents as the input volumes.
    pub maps: Vec<Tensor<f32>>,
    /// Relevance assigned to the age coordinate; recorded, never imaged.
    pub age_relevance: f64,
    pub anchor: Anchor,
    /// The value redistributed: f(x) or a_l.
    pub anchor_value: f32,
    /// (sum of maps + age ledger) - anchor value.
    pub conservation_residual: f64,
    /// Voxel-wise sum over contrasts of relevance times image, if built.
    pub combined: Option<Tensor<f32>>,
}

fn ensure_finite(label: &'static str, t: &Tensor<f32>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric("lrp_backward", format!("non-finite relevance at {}", label)))
    }
}

/// Relevance backward through one encoder, from its hidden vector down to its
/// input volume.
fn encoder_backward(
    enc: &EncoderParams<f32>,
    tr: &EncoderTrace,
    r_hidden: &[f32],
    cfg: &RuleConfig,
) -> Result<Tensor<f32>> {
    let p = cfg.params();
    // head FC back onto the flattened features
    let r_flat = fc_redistribute(
        &enc.head_fc.weight,
        tr.head_fc_in.data(),
        r_hidden,
        cfg.fc_rule,
        &p,
    )?;
    // reshape to the last block's output extents (head act is pass-through)
    let last_block = enc.blocks.len() - 1;
    let last_shape = {
        // conv2_in of the last dense layer has the block's spatial extents
        let t = &tr.conv2_in[last_block][enc.blocks[last_block].len() - 1];
        let spatial = &t.shape()[1..];
        let c = r_flat.len() / spatial.iter().product::<usize>();
        let mut s = vec![c];
        s.extend_from_slice(spatial);
        s
    };
    let mut r_feat = Tensor::new(last_shape, r_flat)?;
    ensure_finite("head", &r_feat)?;

    for b in (0..enc.blocks.len()).rev() {
        for i in (0..enc.blocks[b].len()).rev() {
            let layer = &enc.blocks[b][i];
            let growth = layer.conv2.weight.shape()[0];
            let prev = r_feat.shape()[0] - growth;
            let mut shape_prev = vec![prev];
            shape_prev.extend_from_slice(&r_feat.shape()[1..]);
            let plane: usize = r_feat.shape()[1..].iter().product();
            let r_prev =
                Tensor::new(shape_prev, r_feat.data()[..prev * plane].to_vec())?;
            let mut shape_g = vec![growth];
            shape_g.extend_from_slice(&r_feat.shape()[1..]);
            let r_y2 = Tensor::new(shape_g, r_feat.data()[prev * plane..].to_vec())?;

            let r_c2 = conv_redistribute(
                &tr.conv2_in[b][i],
                &layer.conv2.weight,
                layer.conv2.stride,
                layer.conv2.pad,
                layer.conv2.mode,
                &r_y2,
                cfg.conv_rule,
                &p,
            )?;
            let r_c1 = conv_redistribute(
                &tr.conv1_in[b][i],
                &layer.conv1.weight,
                layer.conv1.stride,
                layer.conv1.pad,
                layer.conv1.mode,
                &r_c2,
                cfg.conv_rule,
                &p,
            )?;
            ensure_finite("dense layer", &r_c1)?;
            r_feat = Tensor::from_fn(r_prev.shape().to_vec(), |k| {
                r_prev.data()[k] + r_c1.data()[k]
            });
        }
        if b > 0 {
            let t = &enc.transitions[b - 1];
            let r_pool_in = avgpool_redistribute(
                &tr.trans_pool_in[b - 1],
                2,
                2,
                &r_feat,
                cfg.conv_rule,
                &p,
            )?;
            r_feat = conv_redistribute(
                &tr.trans_conv_in[b - 1],
                &t.conv.weight,
                t.conv.stride,
                t.conv.pad,
                t.conv.mode,
                &r_pool_in,
                cfg.conv_rule,
                &p,
            )?;
            ensure_finite("transition", &r_feat)?;
        }
    }

    // stem: winner-take-all through the max pool, norm/ReLU pass-through,
    // then the bounded-input rule at the stem convolution
    let r_pool_in =
        maxpool_redistribute(&r_feat, &tr.stem_pool_argmax, tr.stem_pool_in.shape());
    let map = conv_redistribute(
        &tr.input,
        &enc.stem_conv.weight,
        enc.stem_conv.stride,
        enc.stem_conv.pad,
        enc.stem_conv.mode,
        &r_pool_in,
        cfg.input_rule,
        &p,
    )?;
    ensure_finite("input layer", &map)?;
    Ok(map)
}

/// Relevance backward through the attention branch of one path: score e_l ->
/// w row -> s ⊙ g split -> signal/gate FCs -> hidden vector m_l.
fn attention_branch_backward(
    params: &NetworkParams<f32>,
    trace: &ForwardTrace,
    path: usize,
    r_score: f32,
    cfg: &RuleConfig,
) -> Result<Vec<f32>> {
    let p = cfg.params();
    let att = &trace.attention;
    let r_h = fc_redistribute(
        &params.attention.w.weight,
        &att.prod[path],
        &[r_score],
        cfg.fc_rule,
        &p,
    )?;
    let (r_s, r_g) =
        split_multiplicative(&att.signal[path], &att.gate[path], &r_h, cfg.variant, cfg.delta)?;
    let m = &trace.encoders[path].hidden;
    // tanh / sigmoid are pass-through; the FC rules see the linear parts
    let from_s = fc_redistribute(&params.attention.u.weight, m, &r_s, cfg.fc_rule, &p)?;
    let from_g = fc_redistribute(&params.attention.v.weight, m, &r_g, cfg.fc_rule, &p)?;
    Ok(from_s.iter().zip(&from_g).map(|(&a, &b)| a + b).collect())
}

/// Run the relevance backward pass over a recorded forward trace.
///
/// Requires canonized parameters and a trace produced by exactly those
/// parameters. Biases never receive relevance; the share assigned to the age
/// coordinate is recorded in the bundle's ledger instead of being imaged.
pub fn lrp_backward(
    trace: &ForwardTrace,
    params: &NetworkParams<f32>,
    anchor: Anchor,
    cfg: &RuleConfig,
) -> Result<RelevanceBundle> {
    cfg.validate()?;
    if !params.canonized {
        return Err(Error::Config(
            "lrp_backward: parameters must be canonized (run canonize first)".into(),
        ));
    }
    if trace.params_fingerprint != params.fingerprint() {
        return Err(Error::Data(
            "lrp_backward: trace was produced by different parameters".into(),
        ));
    }
    let spec = &params.spec;
    let paths = spec.paths;
    let m_w = spec.hidden_width;
    let p = cfg.params();
    let mut r_m = vec![vec![0.0f32; m_w]; paths];
    let mut age_relevance = 0.0f64;
    let anchor_value;

    match anchor {
        Anchor::Logit => {
            anchor_value = trace.logit;
            let r_cin = fc_redistribute(
                &params.classifier.weight,
                &trace.classifier_in,
                &[trace.logit],
                cfg.fc_rule,
                &p,
            )?;
            age_relevance = r_cin[m_w] as f64;
            let att = &trace.attention;
            let mut r_a = vec![0.0f32; paths];
            for j in 0..m_w {
                let z: Vec<f32> =
                    (0..paths).map(|l| att.weights[l] * trace.encoders[l].hidden[j]).collect();
                let shares = redistribute_contributions(&z, r_cin[j], cfg.fc_rule, &p);
                for l in 0..paths {
                    // split the scalar-vector product a_l * m_lj between its operands
                    let (to_m, to_a) = match cfg.variant {
                        SplitVariant::LrpAll => (shares[l], 0.0),
                        SplitVariant::Proposed => {
                            let (aa, ma) =
                                (att.weights[l].abs(), trace.encoders[l].hidden[j].abs());
                            let tot = aa + ma;
                            if tot < cfg.delta {
                                (0.5 * shares[l], 0.5 * shares[l])
                            } else {
                                (ma / tot * shares[l], aa / tot * shares[l])
                            }
                        }
                    };
                    r_m[l][j] += to_m;
                    r_a[l] += to_a;
                }
            }
            for l in 0..paths {
                if r_a[l] != 0.0 {
                    let back = attention_branch_backward(params, trace, l, r_a[l], cfg)?;
                    for (acc, &v) in r_m[l].iter_mut().zip(&back) {
                        *acc += v;
                    }
                }
            }
        }
        Anchor::AttentionWeight(l) => {
            if l >= paths {
                return Err(Error::Config(format!(
                    "lrp_backward: anchor path {} out of {} paths",
                    l, paths
                )));
            }
            anchor_value = trace.attention.weights[l];
            let back = attention_branch_backward(params, trace, l, anchor_value, cfg)?;
            r_m[l].copy_from_slice(&back);
        }
    }

    let mut maps = Vec::with_capacity(paths);
    for l in 0..paths {
        if r_m[l].iter().all(|&v| v == 0.0) {
            maps.push(Tensor::zeros(trace.encoders[l].input.shape().to_vec()));
        } else {
            maps.push(encoder_backward(&params.encoders[l], &trace.encoders[l], &r_m[l], cfg)?);
        }
    }
    let total: f64 = maps
        .iter()
        .map(|m| m.data().iter().map(|&v| v as f64).sum::<f64>())
        .sum::<f64>()
        + age_relevance;
    Ok(RelevanceBundle {
        maps,
        age_relevance,
        anchor,
        anchor_value,
        conservation_residual: total - anchor_value as f64,
        combined: None,
    })
}

/// Voxel-wise sum over contrasts of relevance times image intensity.
pub fn combined_map(maps: &[Tensor<f32>], volumes: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if maps.len() != volumes.len() || maps.is_empty() {
        return Err(Error::Data(format!(
            "combined_map: {} maps vs {} volumes",
            maps.len(),
            volumes.len()
        )));
    }
    for (m, v) in maps.iter().zip(volumes) {
        if m.shape() != v.shape() {
            return Err(Error::shape(
                "combined_map",
                format!("map {:?} vs volume {:?}", m.shape(), v.shape()),
            ));
        }
    }
    let mut out = Tensor::zeros(maps[0].shape().to_vec());
    for (m, v) in maps.iter().zip(volumes) {
        for i in 0..out.len() {
            out.data_mut()[i] += m.data()[i] * v.data()[i];
        }
    }
    Ok(out)
}

/// Canonize, forward, and run one relevance pass; convenience wrapper.
pub fn relevance_for_sample(
    params: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
    anchor: Anchor,
    cfg: &RuleConfig,
) -> Result<RelevanceBundle> {
    let canon = canonize(params)?;
    let out = crate::net::forward(&canon, volumes, age)?;
    lrp_backward(&out.trace, &canon, anchor, cfg)
}
