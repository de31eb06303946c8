//! Declarative architecture description and the network built from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fern::{fern_init, FernConfig, FernEnsembleLayer, WeightMode};
use crate::layers::{BatchNorm, BinaryConv2d, Conv2d, ConvGeometry, NormMode};
use crate::tensor::{DType, Element, Tape, Tensor, Var};

/// What replaces the matrix product between unfold and fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    Fern,
    Conv,
    BinConv,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Fern, Backbone::Conv, Backbone::BinConv];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Fern => "fern",
            Backbone::Conv => "conv",
            Backbone::BinConv => "binconv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One `(c_in, c_out, kernel, stride, norm)` stage plus padding and backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub backbone: Backbone,
}

impl BlockSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Block(BlockSpec),
    AdaptiveAvgPool,
}

/// Hyper-parameters shared by every fern layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FernSettings {
    pub ferns: usize,
    pub depth: usize,
    pub weight_mode: WeightMode,
    pub thresholds_trainable: bool,
}

impl Default for FernSettings {
    fn default() -> Self {
        Self {
            ferns: 24,
            depth: 3,
            weight_mode: WeightMode::LiteralL2,
            thresholds_trainable: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Nominal `C×H×W` input, used for validation and cost reports.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub fern: FernSettings,
    pub conv_bias: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
    pub dtype: DType,
}

impl ModelConfig {
    /// Three strided normalized blocks, global average pooling and a
    /// pointwise classifier: `(3,64,5,2,BN) (64,64,3,2,BN) (64,64,3,2,BN)
    /// pool (64,2,1,1,-)`, padded by `k/2`.
    pub fn reference(backbone: Backbone) -> Self {
        let block = |c_in, c_out, k, s, bn| {
            LayerSpec::Block(BlockSpec {
                in_channels: c_in,
                out_channels: c_out,
                kernel: k,
                stride: s,
                padding: k / 2,
                batch_norm: bn,
                backbone,
            })
        };
        Self {
            name: backbone.name().to_string(),
            input: [3, 64, 64],
            layers: vec![
                block(3, 64, 5, 2, true),
                block(64, 64, 3, 2, true),
                block(64, 64, 3, 2, true),
                LayerSpec::AdaptiveAvgPool,
                block(64, 2, 1, 1, false),
            ],
            fern: FernSettings::default(),
            conv_bias: true,
            bn_momentum: crate::layers::DEFAULT_MOMENTUM,
            bn_epsilon: crate::layers::DEFAULT_EPSILON,
            seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Block(b) => Some(b),
            LayerSpec::AdaptiveAvgPool => None,
        })
    }

    /// Sets every block's backbone.
    pub fn set_backbone(&mut self, backbone: Backbone) {
        for layer in &mut self.layers {
            if let LayerSpec::Block(b) = layer {
                b.backbone = backbone;
            }
        }
    }

    /// The common backbone, when all blocks agree.
    pub fn backbone(&self) -> Option<Backbone> {
        let mut it = self.blocks().map(|b| b.backbone);
        let first = it.next()?;
        it.all(|b| b == first).then_some(first)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut channels = self.input[0];
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Block(b) = layer {
                if b.in_channels != channels {
                    return Err(Error::Config(format!(
                        "layer {} expects {} input channels but receives {channels}",
                        i + 1,
                        b.in_channels
                    )));
                }
                if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                    return Err(Error::Config(format!(
                        "layer {} has a zero channel count, kernel or stride",
                        i + 1
                    )));
                }
                channels = b.out_channels;
            }
        }
        if self.blocks().any(|b| b.backbone == Backbone::Fern) {
            FernConfig {
                ferns: self.fern.ferns,
                depth: self.fern.depth,
                in_dim: 1,
                out_channels: 1,
                weight_mode: self.fern.weight_mode,
                thresholds_trainable: self.fern.thresholds_trainable,
                seed: 0,
            }
            .validate()?;
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "batch norm epsilon {} / momentum {} out of range",
                self.bn_epsilon, self.bn_momentum
            )));
        }
        Ok(())
    }

    /// Fern layer configuration of `block` (meaningful for fern blocks).
    pub fn fern_config(&self, block: &BlockSpec, seed: u64) -> FernConfig {
        FernConfig {
            ferns: self.fern.ferns,
            depth: self.fern.depth,
            in_dim: block.in_dim(),
            out_channels: block.out_channels,
            weight_mode: self.fern.weight_mode,
            thresholds_trainable: self.fern.thresholds_trainable,
            seed,
        }
    }
}

/// Per-layer seed derived from the model seed.
fn layer_seed(seed: u64, layer: usize) -> u64 {
    // splitmix64 finalizer over (seed, layer)
    let mut z = seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneLayer<T> {
    Fern(FernEnsembleLayer<T>),
    Conv(Conv2d<T>),
    BinConv(BinaryConv2d<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    /// 1-based position in [`ModelConfig::layers`].
    pub position: usize,
    pub spec: BlockSpec,
    pub layer: BackboneLayer<T>,
    pub norm: Option<BatchNorm<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage<T> {
    Block(Block<T>),
    AdaptiveAvgPool,
}

/// Serializable model state entry.
#[derive(Clone, Debug, PartialEq)]
pub enum StateValue<T> {
    Float(Tensor<T>),
    Index {
        shape: Vec<usize>,
        values: Vec<usize>,
    },
}

/// Result of recording a forward pass.
pub struct Forward {
    /// `N × classes` logits.
    pub logits: Var,
    /// Tape leaves of every parameter, in [`Model::parameters_mut`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    stages: Vec<Stage<T>>,
}

/// Builds a freshly initialized network from `config`.
pub fn build_model<T: Element>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let last_block = config
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Block(_)));
    let mut stages = Vec::with_capacity(config.layers.len());
    for (i, spec) in config.layers.iter().enumerate() {
        let stage = match *spec {
            LayerSpec::AdaptiveAvgPool => Stage::AdaptiveAvgPool,
            LayerSpec::Block(b) => {
                let seed = layer_seed(config.seed, i);
                let layer = match b.backbone {
                    Backbone::Fern => BackboneLayer::Fern(fern_init(config.fern_config(&b, seed))?),
                    Backbone::Conv => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        BackboneLayer::Conv(Conv2d::init(b.geometry(), config.conv_bias, &mut rng))
                    }
                    Backbone::BinConv => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        BackboneLayer::BinConv(BinaryConv2d::init(
                            b.geometry(),
                            config.conv_bias,
                            &mut rng,
                        ))
                    }
                };
                let norm = b.batch_norm.then(|| {
                    let mut bn = BatchNorm::new(b.out_channels);
                    bn.momentum = config.bn_momentum;
                    bn.epsilon = config.bn_epsilon;
                    bn
                });
                Stage::Block(Block {
                    position: i + 1,
                    spec: b,
                    layer,
                    norm,
                    // index binarization is the fern's own non-linearity
                    relu: b.backbone != Backbone::Fern && Some(i) != last_block,
                })
            }
        };
        stages.push(stage);
    }
    Ok(Model {
        config: config.clone(),
        stages,
    })
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Block(b) => Some(b),
            Stage::AdaptiveAvgPool => None,
        })
    }

    /// Every learnable tensor, frozen ones included, with stable names.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for block in self.blocks() {
            let p = block.position;
            match &block.layer {
                BackboneLayer::Fern(f) => {
                    out.push((format!("l{p}.thresholds"), f.thresholds()));
                    out.push((format!("l{p}.lut"), f.lut()));
                }
                BackboneLayer::Conv(c) => {
                    out.push((format!("l{p}.weight"), &c.weight));
                    if let Some(b) = &c.bias {
                        out.push((format!("l{p}.bias"), b));
                    }
                }
                BackboneLayer::BinConv(c) => {
                    out.push((format!("l{p}.real_weight"), &c.real_weight));
                    if let Some(b) = &c.bias {
                        out.push((format!("l{p}.bias"), b));
                    }
                }
            }
            if let Some(bn) = &block.norm {
                out.push((format!("l{p}.bn.gamma"), &bn.gamma));
                out.push((format!("l{p}.bn.beta"), &bn.beta));
            }
        }
        out
    }

    /// Mutable view of [`Self::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            let Stage::Block(block) = stage else { continue };
            match &mut block.layer {
                BackboneLayer::Fern(f) => {
                    let (t, l) = f.params_mut();
                    out.push(t);
                    out.push(l);
                }
                BackboneLayer::Conv(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                BackboneLayer::BinConv(c) => {
                    out.push(&mut c.real_weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
            }
            if let Some(bn) = &mut block.norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Full serializable state: parameters, normalization buffers and the
    /// frozen fern split dimensions.
    pub fn state(&self) -> Vec<(String, StateValue<T>)> {
        let mut out = Vec::new();
        for block in self.blocks() {
            let p = block.position;
            match &block.layer {
                BackboneLayer::Fern(f) => {
                    let cfg = f.config();
                    out.push((
                        format!("l{p}.dims"),
                        StateValue::Index {
                            shape: vec![cfg.ferns, cfg.depth],
                            values: f.dims().to_vec(),
                        },
                    ));
                    out.push((
                        format!("l{p}.offsets"),
                        StateValue::Index {
                            shape: vec![cfg.ferns],
                            values: f.offsets().to_vec(),
                        },
                    ));
                    out.push((
                        format!("l{p}.thresholds"),
                        StateValue::Float(f.thresholds().clone()),
                    ));
                    out.push((format!("l{p}.lut"), StateValue::Float(f.lut().clone())));
                }
                BackboneLayer::Conv(c) => {
                    out.push((format!("l{p}.weight"), StateValue::Float(c.weight.clone())));
                    if let Some(b) = &c.bias {
                        out.push((format!("l{p}.bias"), StateValue::Float(b.clone())));
                    }
                }
                BackboneLayer::BinConv(c) => {
                    out.push((
                        format!("l{p}.real_weight"),
                        StateValue::Float(c.real_weight.clone()),
                    ));
                    if let Some(b) = &c.bias {
                        out.push((format!("l{p}.bias"), StateValue::Float(b.clone())));
                    }
                }
            }
            if let Some(bn) = &block.norm {
                for (name, t) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    out.push((format!("l{p}.bn.{name}"), StateValue::Float(t.clone())));
                }
            }
        }
        out
    }

    /// Replaces the model state with `entries` (as produced by [`Self::state`]).
    pub fn load_state(&mut self, entries: Vec<(String, StateValue<T>)>) -> Result<()> {
        let mut map: std::collections::HashMap<String, StateValue<T>> =
            entries.into_iter().collect();
        let mut take = |name: String| {
            map.remove(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{name}`")))
        };
        let float = |v: StateValue<T>, name: &str| match v {
            StateValue::Float(t) => Ok(t),
            StateValue::Index { .. } => Err(Error::format(
                "checkpoint",
                format!("entry `{name}` should hold floats"),
            )),
        };
        for stage in &mut self.stages {
            let Stage::Block(block) = stage else { continue };
            let p = block.position;
            match &mut block.layer {
                BackboneLayer::Fern(f) => {
                    let dims = match take(format!("l{p}.dims"))? {
                        StateValue::Index { values, .. } => values,
                        StateValue::Float(_) => {
                            return Err(Error::format("checkpoint", "fern dims must be integers"))
                        }
                    };
                    let offsets = take(format!("l{p}.offsets"))?;
                    let t = float(take(format!("l{p}.thresholds"))?, "thresholds")?;
                    let l = float(take(format!("l{p}.lut"))?, "lut")?;
                    let rebuilt = FernEnsembleLayer::from_parts(f.config().clone(), dims, t, l)?;
                    match offsets {
                        StateValue::Index { values, .. } if values == rebuilt.offsets() => {}
                        _ => {
                            return Err(Error::format(
                                "checkpoint",
                                format!("fern offsets of layer {p} are inconsistent"),
                            ))
                        }
                    }
                    *f = rebuilt;
                }
                BackboneLayer::Conv(c) => {
                    let w = float(take(format!("l{p}.weight"))?, "weight")?;
                    let b = match c.bias {
                        Some(_) => Some(float(take(format!("l{p}.bias"))?, "bias")?),
                        None => None,
                    };
                    *c = Conv2d::from_parts(c.geometry, w, b)?;
                }
                BackboneLayer::BinConv(c) => {
                    let w = float(take(format!("l{p}.real_weight"))?, "real_weight")?;
                    let b = match c.bias {
                        Some(_) => Some(float(take(format!("l{p}.bias"))?, "bias")?),
                        None => None,
                    };
                    *c = BinaryConv2d::from_parts(c.geometry, w, b)?;
                }
            }
            if let Some(bn) = &mut block.norm {
                let c = bn.channels();
                let mut next = |name: &str| -> Result<Tensor<T>> {
                    let t = float(take(format!("l{p}.bn.{name}"))?, name)?;
                    if t.shape() != [c] {
                        return Err(Error::format(
                            "checkpoint",
                            format!("l{p}.bn.{name} has shape {:?}", t.shape()),
                        ));
                    }
                    Ok(t)
                };
                bn.gamma = next("gamma")?.with_requires_grad(true);
                bn.beta = next("beta")?.with_requires_grad(true);
                bn.running_mean = next("running_mean")?;
                bn.running_var = next("running_var")?;
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(
                "checkpoint",
                format!("unexpected entry `{extra}`"),
            ));
        }
        Ok(())
    }

    /// Records the network on `tape`. `mode` selects batch or running
    /// statistics for normalization (and whether the latter are updated).
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: NormMode) -> Result<Forward> {
        let mut x = input;
        let mut params = Vec::new();
        for stage in &mut self.stages {
            match stage {
                Stage::AdaptiveAvgPool => x = tape.adaptive_avg_pool(x)?,
                Stage::Block(block) => {
                    let spec = block.spec;
                    x = match &block.layer {
                        BackboneLayer::Fern(f) => {
                            let (rows, geom) =
                                tape.unfold(x, spec.kernel, spec.stride, spec.padding)?;
                            let t = tape.param(f.thresholds());
                            let l = tape.param(f.lut());
                            params.extend([t, l]);
                            let out = tape.fern(rows, t, l, f)?;
                            tape.fold(out, &geom)?
                        }
                        BackboneLayer::Conv(c) => {
                            let w = tape.param(&c.weight);
                            params.push(w);
                            let b = c.bias.as_ref().map(|b| tape.param(b));
                            params.extend(b);
                            tape.conv2d(x, w, b, &c.geometry)?
                        }
                        BackboneLayer::BinConv(c) => {
                            let w = tape.param(&c.real_weight);
                            params.push(w);
                            let b = c.bias.as_ref().map(|b| tape.param(b));
                            params.extend(b);
                            let wb = tape.binarize_weight(w)?;
                            tape.conv2d(x, wb, b, &c.geometry)?
                        }
                    };
                    if let Some(bn) = &mut block.norm {
                        let g = tape.param(&bn.gamma);
                        let b = tape.param(&bn.beta);
                        params.extend([g, b]);
                        x = tape.batchnorm(x, g, b, bn, mode)?;
                    }
                    if block.relu {
                        x = tape.relu(x);
                    }
                }
            }
        }
        let shape = tape.value(x).shape().to_vec();
        let logits = match shape[..] {
            [n, c, 1, 1] => tape.reshape(x, [n, c])?,
            _ => {
                return Err(Error::Config(format!(
                    "network output has shape {shape:?}; the classifier needs 1×1 spatial maps"
                )))
            }
        };
        Ok(Forward { logits, params })
    }

    /// Inference logits for a batch, normalization in eval mode.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let fwd = self.forward(&mut tape, x, NormMode::Eval)?;
        Ok(tape.value(fwd.logits).clone().with_requires_grad(false))
    }
}
