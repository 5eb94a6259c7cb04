//! The multi-path gated-attention network: per-channel dense-block encoders,
//! shared gated-attention pooling, age concatenation, single-logit classifier.

mod forward;

pub use forward::{
    forward, forward_tape, gated_attention, AttentionInternals, BnMode, EncoderTrace,
    ForwardOutput, ForwardTrace, TapeRefs,
};

use crate::error::{Error, Result};
use crate::io;
use crate::ops::conv::{Pad3, PadMode, Stride3};
use crate::ops::pool::pool_out_extent;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture hyperparameters. Defaults are the desk-scale configuration;
/// extents stay configurable so larger geometries load unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Number of parallel encoder paths (one per input channel/contrast).
    pub paths: usize,
    /// Per-path input extents (D, H, W); inputs are single-channel volumes.
    pub input_extents: [usize; 3],
    /// Filters in the initial convolution.
    pub init_filters: usize,
    /// Dense blocks per encoder; transitions sit between consecutive blocks.
    pub dense_blocks: usize,
    /// Dense layers per block.
    pub layers_per_block: usize,
    /// Feature maps added by each dense layer.
    pub growth: usize,
    /// Bottleneck multiplier: the 1x1x1 conv outputs `bottleneck * growth` maps.
    pub bottleneck: usize,
    /// Width M of the per-path hidden vector.
    pub hidden_width: usize,
    /// Width K of the attention signal/gate branches.
    pub attention_width: usize,
    /// Ages are divided by this before concatenation.
    pub age_divisor: f32,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            paths: 3,
            input_extents: [32, 32, 32],
            init_filters: 16,
            dense_blocks: 4,
            layers_per_block: 2,
            growth: 4,
            bottleneck: 4,
            hidden_width: 32,
            attention_width: 16,
            age_divisor: 100.0,
        }
    }
}

impl NetworkSpec {
    /// A small 3-path configuration used by gradient and conservation checks.
    pub fn micro() -> Self {
        NetworkSpec {
            paths: 3,
            input_extents: [8, 8, 8],
            init_filters: 8,
            dense_blocks: 2,
            layers_per_block: 2,
            growth: 2,
            bottleneck: 4,
            hidden_width: 8,
            attention_width: 4,
            age_divisor: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths < 1 {
            return Err(Error::Config("network: need at least one path".into()));
        }
        for (name, v) in [
            ("init_filters", self.init_filters),
            ("dense_blocks", self.dense_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth", self.growth),
            ("bottleneck", self.bottleneck),
            ("hidden_width", self.hidden_width),
            ("attention_width", self.attention_width),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("network: {} must be >= 1", name)));
            }
        }
        if self.age_divisor <= 0.0 {
            return Err(Error::Config("network: age_divisor must be positive".into()));
        }
        self.spatial_chain()?;
        Ok(())
    }

    /// Spatial extents after the stem pool and after each transition.
    /// Rejects specs whose extents collapse below the pooling requirements,
    /// reporting the minimum viable input.
    pub fn spatial_chain(&self) -> Result<Vec<[usize; 3]>> {
        let reductions = self.dense_blocks; // stem maxpool + (blocks-1) transitions
        let mut chain = Vec::with_capacity(reductions);
        let mut cur = self.input_extents;
        let describe = |stage: &str, cur: [usize; 3]| {
            format!(
                "{} cannot pool extents {:?}; input {:?} is below the minimum {:?} for {} stride-2 stages",
                stage,
                cur,
                self.input_extents,
                [1 << self.dense_blocks, 1 << self.dense_blocks, 1 << self.dense_blocks],
                self.dense_blocks
            )
        };
        for a in 0..3 {
            cur[a] = pool_out_extent(cur[a], 3, 2, 1)
                .map_err(|_| Error::Config(describe("stem maxpool", self.input_extents)))?;
        }
        if cur.iter().any(|&e| e == 0) {
            return Err(Error::Config(describe("stem maxpool", self.input_extents)));
        }
        chain.push(cur);
        for _ in 1..self.dense_blocks {
            for a in 0..3 {
                if cur[a] < 2 {
                    return Err(Error::Config(describe("transition avgpool", cur)));
                }
                cur[a] = (cur[a] - 2) / 2 + 1;
            }
            chain.push(cur);
        }
        Ok(chain)
    }

    /// Encoder channel count entering each dense block.
    pub fn block_in_channels(&self) -> Vec<usize> {
        let mut chans = Vec::with_capacity(self.dense_blocks);
        let mut c = self.init_filters;
        for b in 0..self.dense_blocks {
            chans.push(c);
            c += self.layers_per_block * self.growth;
            if b + 1 < self.dense_blocks {
                c /= 2; // transition compression
            }
        }
        chans
    }

    /// Channel count and spatial extents of the flattened head input.
    pub fn head_input(&self) -> Result<(usize, [usize; 3])> {
        let chain = self.spatial_chain()?;
        let c = *self.block_in_channels().last().expect("at least one block")
            + self.layers_per_block * self.growth;
        Ok((c, *chain.last().expect("chain non-empty")))
    }
}

/// Convolution parameters. `weight` is [F, C, kd, kh, kw].
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: Stride3,
    pub pad: Pad3,
    pub mode: PadMode,
}

/// Batch normalization state. Running statistics freeze at evaluation time.
#[derive(Clone, Debug)]
pub struct BnLayer<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BnLayer<T> {
    pub fn identity(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of_f64(1e-5),
        }
    }
}

/// Normalization/activation slot preceding a linear layer.
///
/// `Bn` means batch norm followed by ReLU. Canonization replaces it with
/// `Shifted` (the frozen affine kept inside the activation) or, where the
/// affine was folded into an adjacent convolution, plain `Relu`.
#[derive(Clone, Debug)]
pub enum NormAct<T: Scalar = f32> {
    Bn(BnLayer<T>),
    Shifted { scale: Vec<T>, shift: Vec<T> },
    Relu,
}

/// Fully connected parameters. `weight` is [out, in].
#[derive(Clone, Debug)]
pub struct LinearParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseLayerParams<T: Scalar = f32> {
    pub act1: NormAct<T>,
    pub conv1: ConvLayer<T>,
    pub act2: NormAct<T>,
    pub conv2: ConvLayer<T>,
}

#[derive(Clone, Debug)]
pub struct TransitionParams<T: Scalar = f32> {
    pub act: NormAct<T>,
    pub conv: ConvLayer<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<T: Scalar = f32> {
    pub stem_conv: ConvLayer<T>,
    /// Stem batch norm; `None` once folded into `stem_conv` by canonization.
    pub stem_bn: Option<BnLayer<T>>,
    pub blocks: Vec<Vec<DenseLayerParams<T>>>,
    pub transitions: Vec<TransitionParams<T>>,
    pub head_act: NormAct<T>,
    pub head_fc: LinearParams<T>,
}

/// Shared gated-attention parameters: signal U, gate V, score row w.
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Scalar = f32> {
    pub u: LinearParams<T>,
    pub v: LinearParams<T>,
    pub w: LinearParams<T>,
}

#[derive(Clone, Debug)]
pub struct NetworkParams<T: Scalar = f32> {
    pub spec: NetworkSpec,
    pub encoders: Vec<EncoderParams<T>>,
    pub attention: AttentionParams<T>,
    pub classifier: LinearParams<T>,
    /// Set once batch norms have been folded away.
    pub canonized: bool,
}

/// Deterministically initialized parameters: fan-in-scaled uniform weights,
/// zero biases, identity batch norms. The same seed rebuilds identical values.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    use rand::{Rng, SeedableRng};
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor<f32> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    };
    let conv = |rngf: &mut dyn FnMut(Vec<usize>, usize) -> Tensor<f32>,
                f: usize,
                c: usize,
                k: usize,
                pad: usize|
     -> ConvLayer {
        ConvLayer {
            weight: rngf(vec![f, c, k, k, k], c * k * k * k),
            bias: Tensor::zeros(vec![f]),
            stride: [1, 1, 1],
            pad: [pad, pad, pad],
            mode: PadMode::Replicate,
        }
    };
    let fc = |rngf: &mut dyn FnMut(Vec<usize>, usize) -> Tensor<f32>,
              o: usize,
              i: usize|
     -> LinearParams {
        LinearParams { weight: rngf(vec![o, i], i), bias: Tensor::zeros(vec![o]) }
    };

    let bw = spec.bottleneck * spec.growth;
    let mut encoders = Vec::with_capacity(spec.paths);
    for _ in 0..spec.paths {
        let stem_conv = conv(&mut uniform, spec.init_filters, 1, 3, 1);
        let stem_bn = Some(BnLayer::identity(spec.init_filters));
        let mut blocks = Vec::with_capacity(spec.dense_blocks);
        let mut transitions = Vec::with_capacity(spec.dense_blocks - 1);
        let block_in = spec.block_in_channels();
        for (b, &c_in) in block_in.iter().enumerate() {
            let mut layers = Vec::with_capacity(spec.layers_per_block);
            for l in 0..spec.layers_per_block {
                let c_l = c_in + l * spec.growth;
                layers.push(DenseLayerParams {
                    act1: NormAct::Bn(BnLayer::identity(c_l)),
                    conv1: conv(&mut uniform, bw, c_l, 1, 0),
                    act2: NormAct::Bn(BnLayer::identity(bw)),
                    conv2: conv(&mut uniform, spec.growth, bw, 3, 1),
                });
            }
            blocks.push(layers);
            if b + 1 < spec.dense_blocks {
                let c_out = c_in + spec.layers_per_block * spec.growth;
                transitions.push(TransitionParams {
                    act: NormAct::Bn(BnLayer::identity(c_out)),
                    conv: conv(&mut uniform, c_out / 2, c_out, 1, 0),
                });
            }
        }
        let (head_c, head_sp) = spec.head_input()?;
        let head_in = head_c * head_sp[0] * head_sp[1] * head_sp[2];
        encoders.push(EncoderParams {
            stem_conv,
            stem_bn,
            blocks,
            transitions,
            head_act: NormAct::Bn(BnLayer::identity(head_c)),
            head_fc: fc(&mut uniform, spec.hidden_width, head_in),
        });
    }
    let attention = AttentionParams {
        u: fc(&mut uniform, spec.attention_width, spec.hidden_width),
        v: fc(&mut uniform, spec.attention_width, spec.hidden_width),
        w: fc(&mut uniform, 1, spec.attention_width),
    };
    let classifier = fc(&mut uniform, 1, spec.hidden_width + 1);
    Ok(NetworkParams { spec: spec.clone(), encoders, attention, classifier, canonized: false })
}

impl<T: Scalar> NormAct<T> {
    fn visit(&self, f: &mut impl FnMut(&Tensor<T>)) {
        if let NormAct::Bn(bn) = self {
            f(&bn.gamma);
            f(&bn.beta);
        }
    }
    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        if let NormAct::Bn(bn) = self {
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Visit every trainable tensor in a fixed, documented order:
    /// per path (stem conv w/b, stem bn g/b, per block per layer act1 g/b,
    /// conv1 w/b, act2 g/b, conv2 w/b, per transition act g/b + conv w/b,
    /// head act g/b + fc w/b), attention u/v/w (w then b each), classifier.
    pub fn for_each_trainable(&self, f: &mut impl FnMut(&Tensor<T>)) {
        for e in &self.encoders {
            f(&e.stem_conv.weight);
            f(&e.stem_conv.bias);
            if let Some(bn) = &e.stem_bn {
                f(&bn.gamma);
                f(&bn.beta);
            }
            for (b, block) in e.blocks.iter().enumerate() {
                for layer in block {
                    layer.act1.visit(f);
                    f(&layer.conv1.weight);
                    f(&layer.conv1.bias);
                    layer.act2.visit(f);
                    f(&layer.conv2.weight);
                    f(&layer.conv2.bias);
                }
                if b < e.transitions.len() {
                    let t = &e.transitions[b];
                    t.act.visit(f);
                    f(&t.conv.weight);
                    f(&t.conv.bias);
                }
            }
            e.head_act.visit(f);
            f(&e.head_fc.weight);
            f(&e.head_fc.bias);
        }
        for lin in [&self.attention.u, &self.attention.v, &self.attention.w, &self.classifier] {
            f(&lin.weight);
            f(&lin.bias);
        }
    }

    /// Mutable twin of [`Self::for_each_trainable`]; identical order.
    pub fn for_each_trainable_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        for e in &mut self.encoders {
            f(&mut e.stem_conv.weight);
            f(&mut e.stem_conv.bias);
            if let Some(bn) = &mut e.stem_bn {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            let ntrans = e.transitions.len();
            for (b, block) in e.blocks.iter_mut().enumerate() {
                for layer in block {
                    layer.act1.visit_mut(f);
                    f(&mut layer.conv1.weight);
                    f(&mut layer.conv1.bias);
                    layer.act2.visit_mut(f);
                    f(&mut layer.conv2.weight);
                    f(&mut layer.conv2.bias);
                }
                if b < ntrans {
                    let t = &mut e.transitions[b];
                    t.act.visit_mut(f);
                    f(&mut t.conv.weight);
                    f(&mut t.conv.bias);
                }
            }
            e.head_act.visit_mut(f);
            f(&mut e.head_fc.weight);
            f(&mut e.head_fc.bias);
        }
        for lin in
            [&mut self.attention.u, &mut self.attention.v, &mut self.attention.w, &mut self.classifier]
        {
            f(&mut lin.weight);
            f(&mut lin.bias);
        }
    }

    /// Visit batch-norm layers in tape-walk order (stem, block layers, transitions, head).
    pub fn for_each_bn_mut(&mut self, f: &mut impl FnMut(&mut BnLayer<T>)) {
        for e in &mut self.encoders {
            if let Some(bn) = &mut e.stem_bn {
                f(bn);
            }
            let ntrans = e.transitions.len();
            for (b, block) in e.blocks.iter_mut().enumerate() {
                for layer in block {
                    if let NormAct::Bn(bn) = &mut layer.act1 {
                        f(bn);
                    }
                    if let NormAct::Bn(bn) = &mut layer.act2 {
                        f(bn);
                    }
                }
                if b < ntrans {
                    if let NormAct::Bn(bn) = &mut e.transitions[b].act {
                        f(bn);
                    }
                }
            }
            if let NormAct::Bn(bn) = &mut e.head_act {
                f(bn);
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.for_each_trainable(&mut |t| n += t.len());
        n
    }

    /// Zero every bias-like parameter: conv/FC biases, BN shift and running
    /// mean. Used by conservation checks that require a bias-free network.
    pub fn zero_biases(&mut self) {
        let zero_norm = |na: &mut NormAct<T>| match na {
            NormAct::Bn(bn) => {
                bn.beta = Tensor::zeros(vec![bn.beta.len()]);
                bn.running_mean = vec![T::zero(); bn.running_mean.len()];
            }
            NormAct::Shifted { shift, .. } => {
                for v in shift.iter_mut() {
                    *v = T::zero();
                }
            }
            NormAct::Relu => {}
        };
        for e in &mut self.encoders {
            e.stem_conv.bias = Tensor::zeros(vec![e.stem_conv.bias.len()]);
            if let Some(bn) = &mut e.stem_bn {
                bn.beta = Tensor::zeros(vec![bn.beta.len()]);
                bn.running_mean = vec![T::zero(); bn.running_mean.len()];
            }
            for block in &mut e.blocks {
                for layer in block {
                    zero_norm(&mut layer.act1);
                    zero_norm(&mut layer.act2);
                    layer.conv1.bias = Tensor::zeros(vec![layer.conv1.bias.len()]);
                    layer.conv2.bias = Tensor::zeros(vec![layer.conv2.bias.len()]);
                }
            }
            for t in &mut e.transitions {
                zero_norm(&mut t.act);
                t.conv.bias = Tensor::zeros(vec![t.conv.bias.len()]);
            }
            zero_norm(&mut e.head_act);
            e.head_fc.bias = Tensor::zeros(vec![e.head_fc.bias.len()]);
        }
        for lin in
            [&mut self.attention.u, &mut self.attention.v, &mut self.attention.w, &mut self.classifier]
        {
            lin.bias = Tensor::zeros(vec![lin.bias.len()]);
        }
    }

    /// All state tensors (trainable + frozen statistics + canonized residues)
    /// in a fixed order; this is the checkpoint blob order.
    pub fn state_tensors(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        let norm_state = |na: &NormAct<T>, out: &mut Vec<Tensor<T>>| match na {
            NormAct::Bn(bn) => {
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
                out.push(Tensor::new(vec![bn.running_mean.len()], bn.running_mean.clone()).expect("length"));
                out.push(Tensor::new(vec![bn.running_var.len()], bn.running_var.clone()).expect("length"));
            }
            NormAct::Shifted { scale, shift } => {
                out.push(Tensor::new(vec![scale.len()], scale.clone()).expect("length"));
                out.push(Tensor::new(vec![shift.len()], shift.clone()).expect("length"));
            }
            NormAct::Relu => {}
        };
        for e in &self.encoders {
            out.push(e.stem_conv.weight.clone());
            out.push(e.stem_conv.bias.clone());
            if let Some(bn) = &e.stem_bn {
                norm_state(&NormAct::Bn(bn.clone()), &mut out);
            }
            for (b, block) in e.blocks.iter().enumerate() {
                for layer in block {
                    norm_state(&layer.act1, &mut out);
                    out.push(layer.conv1.weight.clone());
                    out.push(layer.conv1.bias.clone());
                    norm_state(&layer.act2, &mut out);
                    out.push(layer.conv2.weight.clone());
                    out.push(layer.conv2.bias.clone());
                }
                if b < e.transitions.len() {
                    norm_state(&e.transitions[b].act, &mut out);
                    out.push(e.transitions[b].conv.weight.clone());
                    out.push(e.transitions[b].conv.bias.clone());
                }
            }
            norm_state(&e.head_act, &mut out);
            out.push(e.head_fc.weight.clone());
            out.push(e.head_fc.bias.clone());
        }
        for lin in [&self.attention.u, &self.attention.v, &self.attention.w, &self.classifier] {
            out.push(lin.weight.clone());
            out.push(lin.bias.clone());
        }
        out
    }

    /// FNV-1a over the bit patterns of all state tensors; used to pair a
    /// forward trace with the parameters that produced it.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for t in self.state_tensors() {
            for v in t.data() {
                mix(&v.as_f64().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let cast_conv = |c: &ConvLayer<T>| ConvLayer {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            pad: c.pad,
            mode: c.mode,
        };
        let cast_lin = |l: &LinearParams<T>| LinearParams { weight: l.weight.cast(), bias: l.bias.cast() };
        let cast_bn = |b: &BnLayer<T>| BnLayer {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            running_var: b.running_var.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            eps: U::of_f64(b.eps.as_f64()),
        };
        let cast_norm = |n: &NormAct<T>| match n {
            NormAct::Bn(bn) => NormAct::Bn(cast_bn(bn)),
            NormAct::Shifted { scale, shift } => NormAct::Shifted {
                scale: scale.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                shift: shift.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            },
            NormAct::Relu => NormAct::Relu,
        };
        NetworkParams {
            spec: self.spec.clone(),
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderParams {
                    stem_conv: cast_conv(&e.stem_conv),
                    stem_bn: e.stem_bn.as_ref().map(cast_bn),
                    blocks: e
                        .blocks
                        .iter()
                        .map(|blk| {
                            blk.iter()
                                .map(|l| DenseLayerParams {
                                    act1: cast_norm(&l.act1),
                                    conv1: cast_conv(&l.conv1),
                                    act2: cast_norm(&l.act2),
                                    conv2: cast_conv(&l.conv2),
                                })
                                .collect()
                        })
                        .collect(),
                    transitions: e
                        .transitions
                        .iter()
                        .map(|t| TransitionParams { act: cast_norm(&t.act), conv: cast_conv(&t.conv) })
                        .collect(),
                    head_act: cast_norm(&e.head_act),
                    head_fc: cast_lin(&e.head_fc),
                })
                .collect(),
            attention: AttentionParams {
                u: cast_lin(&self.attention.u),
                v: cast_lin(&self.attention.v),
                w: cast_lin(&self.attention.w),
            },
            classifier: cast_lin(&self.classifier),
            canonized: self.canonized,
        }
    }
}

impl NetworkParams<f32> {
    /// Replace state tensors from a flat list in [`Self::state_tensors`] order.
    fn load_state(&mut self, blobs: &[Tensor<f32>]) -> Result<()> {
        let expect = self.state_tensors();
        if expect.len() != blobs.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, structure expects {}",
                blobs.len(),
                expect.len()
            )));
        }
        for (e, b) in expect.iter().zip(blobs) {
            if e.shape() != b.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor shape {:?} does not match structure {:?}",
                    b.shape(),
                    e.shape()
                )));
            }
        }
        let mut it = blobs.iter();
        let mut next = || it.next().expect("length checked").clone();
        let load_norm = |na: &mut NormAct<f32>, next: &mut dyn FnMut() -> Tensor<f32>| match na {
            NormAct::Bn(bn) => {
                bn.gamma = next();
                bn.beta = next();
                bn.running_mean = next().into_data();
                bn.running_var = next().into_data();
            }
            NormAct::Shifted { scale, shift } => {
                *scale = next().into_data();
                *shift = next().into_data();
            }
            NormAct::Relu => {}
        };
        for e in &mut self.encoders {
            e.stem_conv.weight = next();
            e.stem_conv.bias = next();
            if let Some(bn) = &mut e.stem_bn {
                let mut na = NormAct::Bn(bn.clone());
                load_norm(&mut na, &mut next);
                if let NormAct::Bn(b) = na {
                    *bn = b;
                }
            }
            let ntrans = e.transitions.len();
            for (b, block) in e.blocks.iter_mut().enumerate() {
                for layer in block {
                    load_norm(&mut layer.act1, &mut next);
                    layer.conv1.weight = next();
                    layer.conv1.bias = next();
                    load_norm(&mut layer.act2, &mut next);
                    layer.conv2.weight = next();
                    layer.conv2.bias = next();
                }
                if b < ntrans {
                    load_norm(&mut e.transitions[b].act, &mut next);
                    e.transitions[b].conv.weight = next();
                    e.transitions[b].conv.bias = next();
                }
            }
            load_norm(&mut e.head_act, &mut next);
            e.head_fc.weight = next();
            e.head_fc.bias = next();
        }
        for lin in
            [&mut self.attention.u, &mut self.attention.v, &mut self.attention.w, &mut self.classifier]
        {
            lin.weight = next();
            lin.bias = next();
        }
        Ok(())
    }
}

/// Rebuild the parameter skeleton for a spec, matching the structure a
/// checkpoint was saved with.
fn skeleton(spec: &NetworkSpec, canonized: bool) -> Result<NetworkParams> {
    let mut p = build(spec, 0)?;
    if canonized {
        for e in &mut p.encoders {
            e.stem_bn = None;
            for block in &mut e.blocks {
                for layer in block {
                    let c1 = layer.conv1.weight.shape()[1];
                    layer.act1 = NormAct::Shifted { scale: vec![1.0; c1], shift: vec![0.0; c1] };
                    layer.act2 = NormAct::Relu;
                }
            }
            for t in &mut e.transitions {
                let c = t.conv.weight.shape()[1];
                t.act = NormAct::Shifted { scale: vec![1.0; c], shift: vec![0.0; c] };
            }
            let hc = match &e.head_act {
                NormAct::Bn(bn) => bn.gamma.len(),
                NormAct::Shifted { scale, .. } => scale.len(),
                NormAct::Relu => 0,
            };
            e.head_act = NormAct::Shifted { scale: vec![1.0; hc], shift: vec![0.0; hc] };
        }
        p.canonized = true;
    }
    Ok(p)
}

/// Persist parameters: JSON manifest (spec, seed, layer list, blob offsets)
/// followed by concatenated TNS1 blobs.
pub fn write_checkpoint(path: &Path, params: &NetworkParams, seed: u64) -> Result<()> {
    let blobs = params.state_tensors();
    let layer_list: Vec<String> = (0..blobs.len()).map(|i| format!("tensor_{:04}", i)).collect();
    let manifest = serde_json::json!({
        "format": "relvox-checkpoint-v1",
        "spec": params.spec,
        "seed": seed,
        "canonized": params.canonized,
        "layer_list": layer_list,
        "fingerprint": format!("{:016x}", params.fingerprint()),
    });
    io::write_blob_container(path, &manifest, &blobs)
}

/// Load a checkpoint; returns (params, seed recorded at save time).
pub fn read_checkpoint(path: &Path) -> Result<(NetworkParams, u64)> {
    let (manifest, blobs) = io::read_blob_container(path)?;
    if manifest["format"] != "relvox-checkpoint-v1" {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "not a checkpoint container".into(),
        });
    }
    let spec: NetworkSpec = serde_json::from_value(manifest["spec"].clone())?;
    let canonized = manifest["canonized"].as_bool().unwrap_or(false);
    let seed = manifest["seed"].as_u64().unwrap_or(0);
    let mut params = skeleton(&spec, canonized)?;
    params.load_state(&blobs)?;
    Ok((params, seed))
}
