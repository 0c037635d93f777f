//! The segmentation U-Net.
//!
//! `depth` encoder blocks, each followed by 2x max pooling, a bottleneck
//! block, then `depth` decoder stages (2x upsampling, concatenation with the
//! matching encoder output, block) and a 1x1x1 head with a sigmoid. A block
//! is conv3 -> BN -> act -> conv3 -> BN -> act -> spatial dropout. Encoder
//! level `l` has `base_channels << l` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::activation::{sample_dropout_mask, sigmoid, sigmoid_backward, spatial_dropout3d, Activation};
use super::conv::{
    conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, upsample_nearest2,
    upsample_nearest2_backward, ConvSpec,
};
use super::norm::{batchnorm3d_backward, batchnorm3d_eval, batchnorm3d_train, update_running_stats, BnCache};
use super::pool::{maxpool3d, maxpool3d_backward};
use super::tensor::{concat_channels, split_channels, Scalar, Tensor5};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Transposed convolution, kernel 2, stride 2.
    #[default]
    TransposedConv,
    /// Nearest-neighbour doubling followed by a 1x1x1 convolution.
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub upsample: UpsampleMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 2,
            base_channels: 8,
            depth: 4,
            dropout_rate: 0.2,
            activation: Activation::Sigmoid,
            upsample: UpsampleMode::TransposedConv,
        }
    }
}

impl UNetConfig {
    /// Full-size network: 32 base channels, four levels.
    pub fn full_scale(in_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            base_channels: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument(format!(
                "in_channels, base_channels and depth must be >= 1: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.base_channels.checked_shl(self.depth as u32).is_none() {
            return Err(Error::InvalidArgument("channel count overflows".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must halve cleanly `depth` times.
    pub fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        if shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels, shape[1]
            )));
        }
        let f = 1usize << self.depth;
        if shape[2..].iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be positive multiples of {f}",
                &shape[2..]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// One named parameter tensor. Vectors are stored as `[n, 1, 1, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Tensor5<S>,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        self.value.data_mut()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    conv1: ConvIdx,
    bn1: BnIdx,
    conv2: ConvIdx,
    bn2: BnIdx,
}

/// Tensor indices of every layer, in canonical order.
#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<BlockIdx>,
    bottom: BlockIdx,
    /// Indexed by level; `up[l]` maps level `l + 1` to level `l`.
    up: Vec<ConvIdx>,
    dec: Vec<BlockIdx>,
    head: ConvIdx,
}

/// Name, shape and kind of every tensor, canonical order.
pub type TensorSpec = (String, Vec<usize>, ParamKind);

fn build_layout(cfg: &UNetConfig) -> (Layout, Vec<TensorSpec>) {
    let mut specs: Vec<TensorSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
        specs.push((name, shape, kind));
        specs.len() - 1
    };
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize,
                    name: &str,
                    wshape: Vec<usize>,
                    out: usize| ConvIdx {
        w: push(format!("{name}.weight"), wshape, ParamKind::Weight),
        b: push(format!("{name}.bias"), vec![out], ParamKind::Bias),
    };
    let bn = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize, name: &str, c: usize| BnIdx {
        gamma: push(format!("{name}.gamma"), vec![c], ParamKind::Gamma),
        beta: push(format!("{name}.beta"), vec![c], ParamKind::Beta),
        mean: push(format!("{name}.running_mean"), vec![c], ParamKind::RunningMean),
        var: push(format!("{name}.running_var"), vec![c], ParamKind::RunningVar),
    };
    let block = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize, name: &str, cin: usize, cout: usize| {
        let conv1 = conv(push, &format!("{name}.conv1"), vec![cout, cin, 3, 3, 3], cout);
        let bn1 = bn(push, &format!("{name}.bn1"), cout);
        let conv2 = conv(push, &format!("{name}.conv2"), vec![cout, cout, 3, 3, 3], cout);
        let bn2 = bn(push, &format!("{name}.bn2"), cout);
        BlockIdx { conv1, bn1, conv2, bn2 }
    };

    let d = cfg.depth;
    let mut enc = Vec::with_capacity(d);
    for l in 0..d {
        let cin = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
        enc.push(block(&mut push, &format!("enc{l}"), cin, cfg.channels(l)));
    }
    let bottom = block(&mut push, "bottleneck", cfg.channels(d - 1), cfg.channels(d));
    let mut up = vec![ConvIdx { w: 0, b: 0 }; d];
    let mut dec = vec![bottom; d];
    for l in (0..d).rev() {
        let (hi, lo) = (cfg.channels(l + 1), cfg.channels(l));
        let wshape = match cfg.upsample {
            UpsampleMode::TransposedConv => vec![hi, lo, 2, 2, 2],
            UpsampleMode::NearestConv => vec![lo, hi, 1, 1, 1],
        };
        up[l] = conv(&mut push, &format!("up{l}"), wshape, lo);
        dec[l] = block(&mut push, &format!("dec{l}"), 2 * lo, lo);
    }
    let head = conv(&mut push, "head", vec![1, cfg.channels(0), 1, 1, 1], 1);
    (
        Layout {
            enc,
            bottom,
            up,
            dec,
            head,
        },
        specs,
    )
}

/// Canonical tensor list of a configuration.
pub fn tensor_specs(cfg: &UNetConfig) -> Vec<TensorSpec> {
    build_layout(cfg).1
}

fn shape5(shape: &[usize]) -> [usize; 5] {
    let mut s = [1usize; 5];
    s[..shape.len()].copy_from_slice(shape);
    s
}

/// All parameters and batch-norm running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<S> {
    pub config: UNetConfig,
    pub tensors: Vec<ParamTensor<S>>,
}

impl<S: Scalar> UNetParams<S> {
    /// Builds parameters from raw tensors in canonical order, checking
    /// every name and shape against the configuration.
    pub fn from_tensors(config: UNetConfig, tensors: Vec<(String, Vec<usize>, Vec<S>)>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            let missing = specs
                .iter()
                .find(|s| !tensors.iter().any(|t| t.0 == s.0))
                .map(|s| s.0.clone())
                .unwrap_or_else(|| {
                    tensors
                        .iter()
                        .find(|t| !specs.iter().any(|s| s.0 == t.0))
                        .map(|t| t.0.clone())
                        .unwrap_or_default()
                });
            return Err(Error::Shape(format!(
                "expected {} tensors, found {} (first mismatch: {missing})",
                specs.len(),
                tensors.len()
            )));
        }
        let mut out = Vec::with_capacity(specs.len());
        for ((name, shape, kind), (tname, tshape, data)) in specs.into_iter().zip(tensors) {
            if name != tname || shape != tshape {
                return Err(Error::Shape(format!(
                    "tensor {tname} has shape {tshape:?}; configuration expects {name} with shape {shape:?}"
                )));
            }
            out.push(ParamTensor {
                value: Tensor5::from_vec(shape5(&shape), data)?,
                name,
                shape,
                kind,
            });
        }
        Ok(UNetParams { config, tensors: out })
    }

    pub fn num_learnable(&self) -> usize {
        self.tensors.iter().filter(|t| t.kind.learnable()).map(|t| t.value.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> UNetParams<T> {
        UNetParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    value: t.value.cast(),
                })
                .collect(),
        }
    }

    fn t(&self, i: usize) -> &Tensor5<S> {
        &self.tensors[i].value
    }

    fn v(&self, i: usize) -> &[S] {
        self.tensors[i].value.data()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.all_finite())
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases, unit BN scale,
/// zero BN shift, running mean 0 and variance 1. Fully determined by `seed`.
pub fn init_params<S: Scalar>(config: &UNetConfig, seed: u64) -> Result<UNetParams<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = tensor_specs(config);
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape, kind) in specs {
        let n: usize = shape.iter().product();
        let data: Vec<S> = match kind {
            ParamKind::Weight => {
                let std = he_std(&name, &shape, config);
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| S::of(normal.sample(&mut rng))).collect()
            }
            ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => vec![S::zero(); n],
            ParamKind::Gamma | ParamKind::RunningVar => vec![S::one(); n],
        };
        tensors.push((name, shape, data));
    }
    UNetParams::from_tensors(config.clone(), tensors)
}

/// Number of terms summed into each output of a weight tensor. For the
/// transposed convolution every output sees one tap per input channel.
pub fn fan_in(name: &str, shape: &[usize], config: &UNetConfig) -> usize {
    if name.starts_with("up") && config.upsample == UpsampleMode::TransposedConv {
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

pub fn he_std(name: &str, shape: &[usize], config: &UNetConfig) -> f64 {
    (2.0 / fan_in(name, shape, config) as f64).sqrt()
}

/// Whether a train-mode forward pass samples dropout masks.
pub enum Dropout<'a> {
    Off,
    Sample(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
struct BlockTape<S> {
    input: Tensor5<S>,
    bn1: BnCache<S>,
    a1: Tensor5<S>,
    bn2: BnCache<S>,
    a2: Tensor5<S>,
    mask: Option<Vec<S>>,
}

/// Activations kept by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    enc: Vec<BlockTape<S>>,
    pools: Vec<(Vec<u32>, [usize; 5])>,
    bottom: Option<BlockTape<S>>,
    /// Per level: the tensor fed to the upsampling layer and, for
    /// nearest-mode, the doubled tensor fed to its 1x1x1 convolution.
    up_in: Vec<Option<(Tensor5<S>, Option<Tensor5<S>>)>>,
    dec: Vec<Option<BlockTape<S>>>,
    head_in: Option<Tensor5<S>>,
    output: Option<Tensor5<S>>,
}

/// Gradients aligned with `UNetParams::tensors`; empty for running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub tensors: Vec<Vec<S>>,
    pub input: Option<Tensor5<S>>,
}

impl<S: Scalar> Grads<S> {
    fn zeros(params: &UNetParams<S>) -> Self {
        Grads {
            tensors: params
                .tensors
                .iter()
                .map(|t| if t.kind.learnable() { vec![S::zero(); t.value.len()] } else { Vec::new() })
                .collect(),
            input: None,
        }
    }
}

/// Forward/backward driver bound to one parameter set.
pub struct UNet<'p, S> {
    params: &'p UNetParams<S>,
    layout: Layout,
}

impl<'p, S: Scalar> UNet<'p, S> {
    pub fn new(params: &'p UNetParams<S>) -> Self {
        let (layout, _) = build_layout(&params.config);
        UNet { params, layout }
    }

    fn cfg(&self) -> &UNetConfig {
        &self.params.config
    }

    fn conv(&self, x: &Tensor5<S>, c: ConvIdx, spec: ConvSpec) -> Result<Tensor5<S>> {
        conv3d(x, self.params.t(c.w), self.params.v(c.b), spec)
    }

    fn block_train(&self, x: Tensor5<S>, b: BlockIdx, dropout: &mut Dropout) -> Result<(Tensor5<S>, BlockTape<S>)> {
        let p = self.params;
        let act = self.cfg().activation;
        let y1 = self.conv(&x, b.conv1, ConvSpec::SAME3)?;
        let (z1, bn1) = batchnorm3d_train(&y1, p.v(b.bn1.gamma), p.v(b.bn1.beta))?;
        drop(y1);
        let a1 = act.forward(&z1);
        drop(z1);
        let y2 = self.conv(&a1, b.conv2, ConvSpec::SAME3)?;
        let (z2, bn2) = batchnorm3d_train(&y2, p.v(b.bn2.gamma), p.v(b.bn2.beta))?;
        drop(y2);
        let a2 = act.forward(&z2);
        let (out, mask) = match dropout {
            Dropout::Sample(rng) if self.cfg().dropout_rate > 0.0 => {
                let m = sample_dropout_mask(a2.batch(), a2.channels(), self.cfg().dropout_rate, *rng)?;
                (spatial_dropout3d(&a2, &m)?, Some(m))
            }
            _ => (a2.clone(), None),
        };
        Ok((
            out,
            BlockTape {
                input: x,
                bn1,
                a1,
                bn2,
                a2,
                mask,
            },
        ))
    }

    fn block_eval(&self, x: &Tensor5<S>, b: BlockIdx) -> Result<Tensor5<S>> {
        let p = self.params;
        let act = self.cfg().activation;
        let bn = |y: &Tensor5<S>, i: BnIdx| batchnorm3d_eval(y, p.v(i.gamma), p.v(i.beta), p.v(i.mean), p.v(i.var));
        let a1 = act.forward(&bn(&self.conv(x, b.conv1, ConvSpec::SAME3)?, b.bn1)?);
        Ok(act.forward(&bn(&self.conv(&a1, b.conv2, ConvSpec::SAME3)?, b.bn2)?))
    }

    fn block_backward(&self, g: Tensor5<S>, b: BlockIdx, tape: &BlockTape<S>, grads: &mut Grads<S>, need_input: bool) -> Result<Option<Tensor5<S>>> {
        let p = self.params;
        let act = self.cfg().activation;
        let g = match &tape.mask {
            Some(m) => spatial_dropout3d(&g, m)?,
            None => g,
        };
        let g = act.backward(&g, &tape.a2);
        let (g, dgamma, dbeta) = batchnorm3d_backward(&g, &tape.bn2, p.v(b.bn2.gamma));
        accumulate(&mut grads.tensors[b.bn2.gamma], &dgamma);
        accumulate(&mut grads.tensors[b.bn2.beta], &dbeta);
        let cg = conv3d_backward(&tape.a1, p.t(b.conv2.w), &g, ConvSpec::SAME3, true)?;
        accumulate(&mut grads.tensors[b.conv2.w], &cg.weight);
        accumulate(&mut grads.tensors[b.conv2.b], &cg.bias);
        let g = act.backward(&cg.input.expect("requested"), &tape.a1);
        let (g, dgamma, dbeta) = batchnorm3d_backward(&g, &tape.bn1, p.v(b.bn1.gamma));
        accumulate(&mut grads.tensors[b.bn1.gamma], &dgamma);
        accumulate(&mut grads.tensors[b.bn1.beta], &dbeta);
        let cg = conv3d_backward(&tape.input, p.t(b.conv1.w), &g, ConvSpec::SAME3, need_input)?;
        accumulate(&mut grads.tensors[b.conv1.w], &cg.weight);
        accumulate(&mut grads.tensors[b.conv1.b], &cg.bias);
        Ok(cg.input)
    }

    fn upsample(&self, x: &Tensor5<S>, l: usize) -> Result<(Tensor5<S>, Option<Tensor5<S>>)> {
        let c = self.layout.up[l];
        match self.cfg().upsample {
            UpsampleMode::TransposedConv => Ok((conv_transpose3d(x, self.params.t(c.w), self.params.v(c.b))?, None)),
            UpsampleMode::NearestConv => {
                let doubled = upsample_nearest2(x);
                Ok((self.conv(&doubled, c, ConvSpec::POINTWISE)?, Some(doubled)))
            }
        }
    }

    fn upsample_backward(&self, g: &Tensor5<S>, l: usize, input: &Tensor5<S>, doubled: Option<&Tensor5<S>>, grads: &mut Grads<S>) -> Result<Tensor5<S>> {
        let c = self.layout.up[l];
        let (cg, finish): (_, fn(&Tensor5<S>) -> Tensor5<S>) = match self.cfg().upsample {
            UpsampleMode::TransposedConv => (conv_transpose3d_backward(input, self.params.t(c.w), g)?, |t| t.clone()),
            UpsampleMode::NearestConv => (
                conv3d_backward(doubled.expect("nearest mode keeps its input"), self.params.t(c.w), g, ConvSpec::POINTWISE, true)?,
                upsample_nearest2_backward,
            ),
        };
        accumulate(&mut grads.tensors[c.w], &cg.weight);
        accumulate(&mut grads.tensors[c.b], &cg.bias);
        Ok(finish(&cg.input.expect("requested")))
    }

    /// Train-mode forward pass (batch statistics, optional dropout).
    pub fn forward_train(&self, input: &Tensor5<S>, mut dropout: Dropout) -> Result<(Tensor5<S>, Tape<S>)> {
        self.cfg().check_input(input.shape())?;
        let d = self.cfg().depth;
        let mut tape = Tape {
            enc: Vec::with_capacity(d),
            pools: Vec::with_capacity(d),
            bottom: None,
            up_in: vec![None; d],
            dec: vec![None; d],
            head_in: None,
            output: None,
        };
        let mut skips = Vec::with_capacity(d);
        let mut x = input.clone();
        for l in 0..d {
            let (out, bt) = self.block_train(x, self.layout.enc[l], &mut dropout)?;
            let (pooled, arg) = maxpool3d(&out)?;
            tape.pools.push((arg, out.shape()));
            tape.enc.push(bt);
            skips.push(out);
            x = pooled;
        }
        let (mut x, bt) = self.block_train(x, self.layout.bottom, &mut dropout)?;
        tape.bottom = Some(bt);
        for l in (0..d).rev() {
            let (up, doubled) = self.upsample(&x, l)?;
            tape.up_in[l] = Some((x, doubled));
            let cat = concat_channels(&skips[l], &up)?;
            let (out, bt) = self.block_train(cat, self.layout.dec[l], &mut dropout)?;
            tape.dec[l] = Some(bt);
            x = out;
        }
        let logits = self.conv(&x, self.layout.head, ConvSpec::POINTWISE)?;
        tape.head_in = Some(x);
        let out = sigmoid(&logits);
        tape.output = Some(out.clone());
        if cfg!(debug_assertions) && !out.all_finite() {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok((out, tape))
    }

    /// Inference: running BN statistics, no dropout, no tape. Intermediate
    /// tensors are released as soon as they are consumed.
    pub fn forward_eval(&self, input: &Tensor5<S>) -> Result<Tensor5<S>> {
        self.cfg().check_input(input.shape())?;
        let d = self.cfg().depth;
        let mut skips = Vec::with_capacity(d);
        let mut x = input.clone();
        for l in 0..d {
            let out = self.block_eval(&x, self.layout.enc[l])?;
            x = maxpool3d(&out)?.0;
            skips.push(out);
        }
        let mut x = self.block_eval(&x, self.layout.bottom)?;
        for l in (0..d).rev() {
            let (up, _) = self.upsample(&x, l)?;
            drop(x);
            let skip = skips.pop().expect("one skip per level");
            let cat = concat_channels(&skip, &up)?;
            drop((skip, up));
            x = self.block_eval(&cat, self.layout.dec[l])?;
        }
        let out = sigmoid(&self.conv(&x, self.layout.head, ConvSpec::POINTWISE)?);
        if !out.all_finite() {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(out)
    }

    /// Gradients of all learnable tensors (and the input when asked) given
    /// `dL/d(output)`.
    pub fn backward(&self, tape: &Tape<S>, grad_output: &Tensor5<S>, need_input: bool) -> Result<Grads<S>> {
        let d = self.cfg().depth;
        let mut grads = Grads::zeros(self.params);
        let out = tape.output.as_ref().ok_or_else(|| Error::InvalidArgument("tape has no output".into()))?;
        if grad_output.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                out.shape()
            )));
        }
        let g = sigmoid_backward(grad_output, out);
        let head = self.layout.head;
        let cg = conv3d_backward(tape.head_in.as_ref().expect("taped"), self.params.t(head.w), &g, ConvSpec::POINTWISE, true)?;
        accumulate(&mut grads.tensors[head.w], &cg.weight);
        accumulate(&mut grads.tensors[head.b], &cg.bias);
        let mut g = cg.input.expect("requested");
        let mut skip_grads: Vec<Option<Tensor5<S>>> = vec![None; d];
        for l in 0..d {
            let bt = tape.dec[l].as_ref().expect("taped");
            let gcat = self
                .block_backward(g, self.layout.dec[l], bt, &mut grads, true)?
                .expect("requested");
            let (gskip, gup) = split_channels(&gcat, self.cfg().channels(l))?;
            skip_grads[l] = Some(gskip);
            let (up_in, doubled) = tape.up_in[l].as_ref().expect("taped");
            // Gradient of dec[l + 1]'s output, or the bottleneck's at the deepest level.
            g = self.upsample_backward(&gup, l, up_in, doubled.as_ref(), &mut grads)?;
        }
        let mut g = self
            .block_backward(g, self.layout.bottom, tape.bottom.as_ref().expect("taped"), &mut grads, true)?
            .expect("requested");
        for l in (0..d).rev() {
            let (arg, shape) = &tape.pools[l];
            let mut gl = maxpool3d_backward(&g, arg, *shape);
            let gs = skip_grads[l].take().expect("set above");
            for (a, b) in gl.data_mut().iter_mut().zip(gs.data()) {
                *a += *b;
            }
            let need = l > 0 || need_input;
            if let Some(gi) = self.block_backward(gl, self.layout.enc[l], &tape.enc[l], &mut grads, need)? {
                g = gi;
            }
        }
        if need_input {
            grads.input = Some(g);
        }
        Ok(grads)
    }
}

fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Folds the batch statistics of a train-mode pass into the running
/// statistics.
pub fn update_bn_running_stats<S: Scalar>(params: &mut UNetParams<S>, tape: &Tape<S>) {
    let (layout, _) = build_layout(&params.config);
    let mut apply = |b: &BlockIdx, t: &BlockTape<S>| {
        for (bn, cache) in [(b.bn1, &t.bn1), (b.bn2, &t.bn2)] {
            let mut mean = params.tensors[bn.mean].value.data().to_vec();
            let mut var = params.tensors[bn.var].value.data().to_vec();
            update_running_stats(cache, &mut mean, &mut var);
            params.tensors[bn.mean].value.data_mut().copy_from_slice(&mean);
            params.tensors[bn.var].value.data_mut().copy_from_slice(&var);
        }
    };
    for (b, t) in layout.enc.iter().zip(&tape.enc) {
        apply(b, t);
    }
    if let Some(t) = &tape.bottom {
        apply(&layout.bottom, t);
    }
    for (b, t) in layout.dec.iter().zip(&tape.dec) {
        if let Some(t) = t {
            apply(b, t);
        }
    }
}

/// Checks that all parameters are finite.
pub fn ensure_finite<S: Scalar>(params: &UNetParams<S>) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite network parameter".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            base_channels: 2,
            depth: 2,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_and_range() {
        let p = init_params::<f32>(&tiny(), 1).unwrap();
        let net = UNet::new(&p);
        let x = Tensor5::full([1, 2, 8, 8, 8], 0.3f32);
        let y = net.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 8, 8, 8]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (yt, _) = net.forward_train(&x, Dropout::Off).unwrap();
        assert_eq!(yt.shape(), y.shape());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = init_params::<f32>(&tiny(), 1).unwrap();
        let net = UNet::new(&p);
        assert!(net.forward_eval(&Tensor5::zeros([1, 1, 8, 8, 8])).is_err());
        assert!(net.forward_eval(&Tensor5::zeros([1, 2, 6, 8, 8])).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params::<f32>(&tiny(), 42).unwrap();
        let b = init_params::<f32>(&tiny(), 42).unwrap();
        let c = init_params::<f32>(&tiny(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn he_std_per_layer() {
        let cfg = UNetConfig::default();
        let p = init_params::<f64>(&cfg, 7).unwrap();
        let mut checked = 0;
        for t in p.tensors.iter().filter(|t| t.kind == ParamKind::Weight && t.value.len() >= 10_000) {
            let n = t.value.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let target = he_std(&t.name, &t.shape, &cfg);
            assert!((std / target - 1.0).abs() < 0.1, "{}: {std} vs {target}", t.name);
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn canonical_names() {
        let specs = tensor_specs(&tiny());
        assert_eq!(specs[0].0, "enc0.conv1.weight");
        assert_eq!(specs[0].1, vec![2, 2, 3, 3, 3]);
        assert_eq!(specs.last().unwrap().0, "head.bias");
        assert!(specs.iter().any(|s| s.0 == "up1.weight" && s.1 == vec![8, 4, 2, 2, 2]));
        assert!(specs.iter().any(|s| s.0 == "dec0.conv1.weight" && s.1 == vec![2, 4, 3, 3, 3]));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut p = init_params::<f64>(&tiny(), 3).unwrap();
        let x = Tensor5::full([1, 2, 8, 8, 8], 0.7f64);
        let (_, tape) = UNet::new(&p).forward_train(&x, Dropout::Off).unwrap();
        let before = p.clone();
        update_bn_running_stats(&mut p, &tape);
        assert_ne!(before, p);
        assert!(p.tensors.iter().filter(|t| t.kind == ParamKind::RunningVar).all(|t| t.data().iter().all(|&v| v >= 0.0)));
    }
}
