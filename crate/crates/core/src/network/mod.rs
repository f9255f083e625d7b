//! Residual noise-map regressor and a plain DnCNN-style variant.
//!
//! The residual network is a `conv(1→C)+ReLU` head, `num_blocks` residual
//! blocks and a `conv(C→1)` tail that emits the predicted noise map. Each
//! block runs `convs_per_block` same-padded convolutions on its main path
//! and adds a `1×1` projection (or the identity) of its input after the
//! last ReLU. All layers use stride 1 and same padding, so the output has
//! the input's spatial size.

mod inference;
pub mod layers;

pub use inference::{
    denoise_image, DenoiseOptions, OutputDomain, Tiling, DEFAULT_TILE, DEFAULT_TILE_OVERLAP,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;
use layers::{relu, relu_backward, BatchNorm2d, BnCache, Conv2d, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resnet,
    PlainCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipProjection {
    Conv1x1,
    Identity,
}

/// Where batch norm and ReLU sit inside a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// conv → BN → ReLU after every convolution.
    PerConv,
    /// Bare convolutions, with a single BN → ReLU after the last one.
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_blocks: usize,
    pub convs_per_block: usize,
    pub channels: usize,
    pub kernel: usize,
    pub skip_projection: SkipProjection,
    #[serde(default = "default_norm")]
    pub norm_placement: NormPlacement,
    /// Total convolution count of the plain variant.
    pub plain_depth: usize,
    /// Fixed input normalization `(x - input_shift) / input_scale` applied
    /// before the head. Not trainable.
    pub input_shift: f64,
    pub input_scale: f64,
}

fn default_norm() -> NormPlacement {
    NormPlacement::PerConv
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Resnet,
            num_blocks: 15,
            convs_per_block: 3,
            channels: 64,
            kernel: 3,
            skip_projection: SkipProjection::Conv1x1,
            norm_placement: NormPlacement::PerConv,
            plain_depth: 17,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// The 17-layer plain network.
    pub fn plain_cnn() -> Self {
        Self {
            arch: Arch::PlainCnn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 1, "channels must be positive");
        ensure!(
            self.kernel >= 1 && self.kernel % 2 == 1,
            "kernel size must be odd, got {}",
            self.kernel
        );
        ensure!(
            self.input_shift.is_finite() && self.input_scale > 0.0 && self.input_scale.is_finite(),
            "input normalization needs a finite shift and a positive scale"
        );
        match self.arch {
            Arch::Resnet => {
                ensure!(self.num_blocks >= 1, "num_blocks must be positive");
                ensure!(self.convs_per_block >= 1, "convs_per_block must be positive");
            }
            Arch::PlainCnn => {
                ensure!(self.plain_depth >= 2, "plain depth must be at least 2");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution with optional batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
struct UnitCache {
    input: Tensor,
    bn: Option<BnCache>,
    out: Tensor,
}

impl Unit {
    fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, bn: bool, relu: bool, seed: u64) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, kernel, seed),
            bn: bn.then(|| BatchNorm2d::new(&format!("{name}.bn"), out_ch)),
            relu,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward_eval(&y);
        }
        if self.relu {
            y = relu(&y);
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, UnitCache) {
        let mut y = self.conv.forward(x);
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (o, c) = bn.forward_train(&y);
            y = o;
            bn_cache = Some(c);
        }
        if self.relu {
            y = relu(&y);
        }
        let cache = UnitCache {
            input: x.clone(),
            bn: bn_cache,
            out: y.clone(),
        };
        (y, cache)
    }

    fn backward(&mut self, cache: &UnitCache, dy: &Tensor) -> Tensor {
        let mut d = if self.relu {
            relu_backward(&cache.out, dy)
        } else {
            dy.clone()
        };
        if let (Some(bn), Some(bc)) = (&mut self.bn, &cache.bn) {
            d = bn.backward(bc, &d);
        }
        self.conv.backward(&cache.input, &d)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.conv.params().into();
        if let Some(bn) = &self.bn {
            v.extend([&bn.gamma, &bn.beta]);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let [w, b] = self.conv.params_mut();
        let mut v = vec![w, b];
        if let Some(bn) = &mut self.bn {
            v.extend([&mut bn.gamma, &mut bn.beta]);
        }
        v
    }

    fn buffers(&self) -> Vec<&Param> {
        self.bn
            .iter()
            .flat_map(|bn| [&bn.running_mean, &bn.running_var])
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        self.bn
            .iter_mut()
            .flat_map(|bn| [&mut bn.running_mean, &mut bn.running_var])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub units: Vec<Unit>,
    pub skip: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Residual(ResidualBlock),
    Plain(Unit),
}

enum StageCache {
    Residual { input: Tensor, units: Vec<UnitCache> },
    Plain(UnitCache),
}

/// Intermediate values of a training forward pass.
pub struct ForwardCache {
    head: UnitCache,
    stages: Vec<StageCache>,
    tail: UnitCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    init_seed: u64,
    pub head: Unit,
    pub stages: Vec<Stage>,
    pub tail: Unit,
}

fn check_finite(t: &Tensor, layer: usize, name: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            name: name.to_string(),
        })
    }
}

/// Builds the network described by `config` with He-normal weights drawn
/// from `init_seed`.
pub fn build_model(config: &ModelConfig, init_seed: u64) -> Result<Model> {
    config.validate()?;
    let (c, k) = (config.channels, config.kernel);
    let head = Unit::new("head", 1, c, k, false, true, init_seed);
    let stages = match config.arch {
        Arch::Resnet => (0..config.num_blocks)
            .map(|b| {
                let units = (0..config.convs_per_block)
                    .map(|u| {
                        let last = u + 1 == config.convs_per_block;
                        let act = config.norm_placement == NormPlacement::PerConv || last;
                        Unit::new(&format!("blocks.{b}.units.{u}"), c, c, k, act, act, init_seed)
                    })
                    .collect();
                let skip = (config.skip_projection == SkipProjection::Conv1x1)
                    .then(|| Conv2d::new(&format!("blocks.{b}.skip"), c, c, 1, init_seed));
                Stage::Residual(ResidualBlock { units, skip })
            })
            .collect(),
        Arch::PlainCnn => (0..config.plain_depth - 2)
            .map(|i| Stage::Plain(Unit::new(&format!("body.{i}"), c, c, k, true, true, init_seed)))
            .collect(),
    };
    let tail = Unit::new("tail", c, 1, k, false, false, init_seed);
    Ok(Model {
        config: *config,
        init_seed,
        head,
        stages,
        tail,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        ensure!(x.batch() >= 1, "batch must be non-empty");
        ensure!(c == 1, "network input must have 1 channel, got {c}");
        ensure!(
            h >= self.config.kernel && w >= self.config.kernel,
            "input {h}x{w} smaller than kernel {}",
            self.config.kernel
        );
        Ok(())
    }

    fn normalize_input(&self, x: &Tensor) -> Tensor {
        let (shift, scale) = (self.config.input_shift, self.config.input_scale);
        if shift == 0.0 && scale == 1.0 {
            x.clone()
        } else {
            x.map(|v| (v - shift) / scale)
        }
    }

    /// Eval-mode forward pass (running batch-norm statistics); needs only
    /// shared access, so a model can serve concurrent inference.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut layer = 0;
        let mut y = self.head.infer(&self.normalize_input(x));
        check_finite(&y, layer, "head")?;
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Residual(block) => {
                    let mut m = y.clone();
                    for unit in &block.units {
                        layer += 1;
                        m = unit.infer(&m);
                        check_finite(&m, layer, &format!("blocks.{i}"))?;
                    }
                    let skip = match &block.skip {
                        Some(conv) => conv.forward(&y),
                        None => y,
                    };
                    m.add_assign(&skip);
                    y = m;
                }
                Stage::Plain(unit) => {
                    layer += 1;
                    y = unit.infer(&y);
                    check_finite(&y, layer, &format!("body.{i}"))?;
                }
            }
        }
        let out = self.tail.infer(&y);
        check_finite(&out, layer + 1, "tail")?;
        Ok(out)
    }

    /// Forward pass; train mode normalizes with batch statistics and
    /// updates the running estimates.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.infer(x),
            Mode::Train => Ok(self.forward_train(x)?.0),
        }
    }

    /// Train-mode forward pass keeping what [`Self::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut layer = 0;
        let (mut y, head) = self.head.forward_train(&self.normalize_input(x));
        check_finite(&y, layer, "head")?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter_mut().enumerate() {
            match stage {
                Stage::Residual(block) => {
                    let input = y;
                    let mut m = input.clone();
                    let mut caches = Vec::with_capacity(block.units.len());
                    for unit in &mut block.units {
                        layer += 1;
                        let (o, c) = unit.forward_train(&m);
                        check_finite(&o, layer, &format!("blocks.{i}"))?;
                        m = o;
                        caches.push(c);
                    }
                    match &block.skip {
                        Some(conv) => m.add_assign(&conv.forward(&input)),
                        None => m.add_assign(&input),
                    }
                    y = m;
                    stages.push(StageCache::Residual {
                        input,
                        units: caches,
                    });
                }
                Stage::Plain(unit) => {
                    layer += 1;
                    let (o, c) = unit.forward_train(&y);
                    check_finite(&o, layer, &format!("body.{i}"))?;
                    y = o;
                    stages.push(StageCache::Plain(c));
                }
            }
        }
        let (out, tail) = self.tail.forward_train(&y);
        check_finite(&out, layer + 1, "tail")?;
        Ok((out, ForwardCache { head, stages, tail }))
    }

    /// Back-propagates `d_out` (gradient of the loss w.r.t. the output),
    /// accumulating into every parameter's `grad`.
    pub fn backward(&mut self, cache: &ForwardCache, d_out: &Tensor) -> Tensor {
        let mut d = self.tail.backward(&cache.tail, d_out);
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages).rev() {
            match (stage, sc) {
                (Stage::Residual(block), StageCache::Residual { input, units }) => {
                    let d_skip = match &mut block.skip {
                        Some(conv) => conv.backward(input, &d),
                        None => d.clone(),
                    };
                    let mut dm = d;
                    for (unit, uc) in block.units.iter_mut().zip(units).rev() {
                        dm = unit.backward(uc, &dm);
                    }
                    dm.add_assign(&d_skip);
                    d = dm;
                }
                (Stage::Plain(unit), StageCache::Plain(uc)) => {
                    d = unit.backward(uc, &d);
                }
                _ => unreachable!("cache layout follows model layout"),
            }
        }
        let scale = self.config.input_scale;
        self.head.backward(&cache.head, &d).map(|g| g / scale)
    }

    fn units(&self) -> Vec<&Unit> {
        let mut v = vec![&self.head];
        for s in &self.stages {
            match s {
                Stage::Residual(b) => v.extend(b.units.iter()),
                Stage::Plain(u) => v.push(u),
            }
        }
        v.push(&self.tail);
        v
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.head.params();
        for s in &self.stages {
            match s {
                Stage::Residual(b) => {
                    for u in &b.units {
                        v.extend(u.params());
                    }
                    if let Some(skip) = &b.skip {
                        v.extend(skip.params());
                    }
                }
                Stage::Plain(u) => v.extend(u.params()),
            }
        }
        v.extend(self.tail.params());
        v
    }

    /// Same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.head.params_mut();
        for s in &mut self.stages {
            match s {
                Stage::Residual(b) => {
                    for u in &mut b.units {
                        v.extend(u.params_mut());
                    }
                    if let Some(skip) = &mut b.skip {
                        v.extend(skip.params_mut());
                    }
                }
                Stage::Plain(u) => v.extend(u.params_mut()),
            }
        }
        v.extend(self.tail.params_mut());
        v
    }

    /// Batch-norm running statistics (not trainable).
    pub fn buffers(&self) -> Vec<&Param> {
        self.units().into_iter().flat_map(|u| u.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.head.buffers_mut();
        for s in &mut self.stages {
            match s {
                Stage::Residual(b) => {
                    for u in &mut b.units {
                        v.extend(u.buffers_mut());
                    }
                }
                Stage::Plain(u) => v.extend(u.buffers_mut()),
            }
        }
        v.extend(self.tail.buffers_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Zeroes the final projection, turning the model into `V̂ = 0`.
    pub fn zero_tail(&mut self) {
        self.tail.conv.weight.value.iter_mut().for_each(|v| *v = 0.0);
        self.tail.conv.bias.value.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Number of trainable elements: conv weights and biases plus batch-norm
/// scale and shift. Running statistics are excluded.
pub fn param_count(model: &Model) -> usize {
    model.params().iter().map(|p| p.len()).sum()
}
