//! Attention-gated U-Net assembled from tape primitives.
//!
//! With `depth = d` the encoder has `d` double-conv levels of
//! `base·2^l` channels, each followed by 2×2 max-pooling, and a bottleneck
//! double-conv of `base·2^d` channels. Each decoder level upsamples with a
//! stride-2 transposed convolution, gates the matching skip connection,
//! concatenates `[gated skip, upsampled]` and applies another double-conv.
//! A 1×1 convolution and a sigmoid produce per-pixel probabilities.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AutodiffError, Shape, Tape, Tensor, Var};
use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("input shape {got} does not fit the model (expects [N, {channels}, {h}, {w}])")]
    ShapeMismatch { got: Shape, channels: usize, h: usize, w: usize },
    #[error("parameter {name}: {detail}")]
    BadParameter { name: String, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of pooling levels.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// `(height, width)`, each divisible by `2^depth`.
    pub input_size: (usize, usize),
    pub attention_enabled: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self { depth: 3, base_channels: 8, in_channels: 1, input_size: (128, 128), attention_enabled: true, init_seed: 0 }
    }

    pub fn full() -> Self {
        Self { depth: 4, base_channels: 32, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::BadConfig(s));
        if self.depth == 0 {
            return bad(format!("depth must be at least 1"));
        }
        if self.depth > 16 {
            return bad(format!("depth {} is too large", self.depth));
        }
        if self.base_channels == 0 {
            return bad(format!("base_channels must be at least 1"));
        }
        if self.in_channels == 0 {
            return bad(format!("in_channels must be at least 1"));
        }
        let (h, w) = self.input_size;
        let unit = 1usize << self.depth;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return bad(format!("input {h}x{w} is not divisible by 2^{} = {unit}", self.depth));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv {
    c1: ConvIdx,
    c2: ConvIdx,
}

/// Parameter indices of one attention gate.
#[derive(Clone, Copy, Debug)]
struct GateIdx {
    wx: ConvIdx,
    wg: ConvIdx,
    psi: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLevel {
    up: ConvIdx,
    gate: Option<GateIdx>,
    block: DoubleConv,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Indexed by level, finest first.
    decoder: Vec<DecoderLevel>,
    head: ConvIdx,
}

struct Spec {
    name: String,
    shape: Shape,
    /// He-init fan-in; `None` for biases, which start at zero.
    fan_in: Option<usize>,
}

#[derive(Default)]
struct SpecBuilder {
    specs: Vec<Spec>,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Shape, fan_in: Option<usize>) -> usize {
        self.specs.push(Spec { name, shape, fan_in });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> ConvIdx {
        let w = self.push(format!("{prefix}.weight"), Shape::new(cout, cin, k, k), Some(cin * k * k));
        let b = self.push(format!("{prefix}.bias"), Shape::vector(cout), None);
        ConvIdx { w, b }
    }

    /// Transposed 2×2 stride-2 convolution: every output pixel sees one tap
    /// per input channel, so the fan-in is `cin`.
    fn up(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvIdx {
        let w = self.push(format!("{prefix}.weight"), Shape::new(cin, cout, 2, 2), Some(cin));
        let b = self.push(format!("{prefix}.bias"), Shape::vector(cout), None);
        ConvIdx { w, b }
    }

    fn double(&mut self, prefix: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv { c1: self.conv(&format!("{prefix}.conv1"), cin, cout, 3), c2: self.conv(&format!("{prefix}.conv2"), cout, cout, 3) }
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let mut sb = SpecBuilder::default();
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut cin = cfg.in_channels;
    for l in 0..cfg.depth {
        encoder.push(sb.double(&format!("enc{l}"), cin, cfg.channels(l)));
        cin = cfg.channels(l);
    }
    let bottleneck = sb.double("bottleneck", cin, cfg.channels(cfg.depth));
    let mut decoder = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let (c, coarse) = (cfg.channels(l), cfg.channels(l + 1));
        let up = sb.up(&format!("dec{l}.up"), coarse, c);
        let gate = cfg.attention_enabled.then(|| {
            let inter = gate_channels(c);
            GateIdx {
                wx: sb.conv(&format!("dec{l}.gate.wx"), c, inter, 1),
                wg: sb.conv(&format!("dec{l}.gate.wg"), coarse, inter, 1),
                psi: sb.conv(&format!("dec{l}.gate.psi"), inter, 1, 1),
            }
        });
        let block = sb.double(&format!("dec{l}"), 2 * c, c);
        decoder.push(DecoderLevel { up, gate, block });
    }
    decoder.reverse();
    let head = sb.conv("head", cfg.channels(0), 1, 1);
    (Layout { encoder, bottleneck, decoder, head }, sb.specs)
}

/// Intermediate width of a gate on a skip connection with `skip` channels.
pub fn gate_channels(skip: usize) -> usize {
    (skip / 2).max(1)
}

/// Head logits are clipped to `±LOGIT_LIMIT` so that f32 probabilities stay
/// strictly inside (0, 1).
pub const LOGIT_LIMIT: f32 = 15.0;

/// Named, ordered parameter tensors plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Gate parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub wx: Var,
    pub bx: Var,
    pub wg: Var,
    pub bg: Var,
    pub psi_w: Var,
    pub psi_b: Var,
}

/// Additive attention gate.
///
/// `x` is a skip feature map `[N, Cx, H, W]` and `g` the coarser gating
/// signal `[N, Cg, H/2, W/2]`. Computes
/// `α = sigmoid(ψ(relu(Wx·x↓2 + Wg·g)))`, where `x↓2` is a stride-2 1×1
/// convolution, upsamples `α` to `H × W` by nearest neighbour and returns
/// `x ⊙ α`, one attention channel broadcast over all of `x`'s channels.
pub fn attention_gate(tape: &mut Tape, x: Var, g: Var, p: &GateParams) -> Result<Var, ModelError> {
    let (xs, gs) = (tape.shape(x), tape.shape(g));
    if xs.n != gs.n || xs.h != 2 * gs.h || xs.w != 2 * gs.w {
        return Err(ModelError::Autodiff(AutodiffError::ShapeMismatch {
            op: "attention_gate",
            detail: format!("skip {xs} needs a gating signal at half resolution, got {gs}"),
        }));
    }
    let theta = tape.conv2d(x, p.wx, Some(p.bx), 2, 0)?;
    let phi = tape.conv2d(g, p.wg, Some(p.bg), 1, 0)?;
    let sum = tape.add(theta, phi)?;
    let a = tape.relu(sum)?;
    let logit = tape.conv2d(a, p.psi_w, Some(p.psi_b), 1, 0)?;
    let alpha = tape.sigmoid(logit)?;
    let up = tape.upsample_nearest2(alpha)?;
    Ok(tape.mul(x, up)?)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replace all parameters, checking count and shapes.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::BadParameter {
                name: String::from("*"),
                detail: format!("expected {} tensors, got {}", self.params.len(), params.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.params[i].shape() {
                return Err(ModelError::BadParameter {
                    name: self.names[i].clone(),
                    detail: format!("expected shape {}, got {}", self.params[i].shape(), p.shape()),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Record every parameter as a leaf, in [`names`](Self::names) order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    fn check_input(&self, s: Shape) -> Result<(), ModelError> {
        let (h, w) = self.cfg.input_size;
        if s.c != self.cfg.in_channels || s.h != h || s.w != w || s.n == 0 {
            return Err(ModelError::ShapeMismatch { got: s, channels: self.cfg.in_channels, h, w });
        }
        Ok(())
    }

    /// Probabilities `[N, 1, H, W]` for input `x` using parameters bound by
    /// [`bind`](Self::bind).
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, ModelError> {
        self.check_input(tape.shape(x))?;
        assert_eq!(params.len(), self.params.len(), "bound parameter count");
        let conv = |tape: &mut Tape, c: ConvIdx, x: Var, pad: usize| tape.conv2d(x, params[c.w], Some(params[c.b]), 1, pad);
        let double = |tape: &mut Tape, d: DoubleConv, x: Var| -> Result<Var, AutodiffError> {
            let y = conv(tape, d.c1, x, 1)?;
            let y = tape.relu(y)?;
            let y = conv(tape, d.c2, y, 1)?;
            tape.relu(y)
        };
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for &level in &self.layout.encoder {
            let f = double(tape, level, h)?;
            skips.push(f);
            h = tape.maxpool2(f)?;
        }
        h = double(tape, self.layout.bottleneck, h)?;
        for (l, dec) in self.layout.decoder.iter().enumerate().rev() {
            let up = tape.conv_transpose2d(h, params[dec.up.w], Some(params[dec.up.b]), 2)?;
            let skip = match dec.gate {
                Some(gi) => {
                    let gp = GateParams {
                        wx: params[gi.wx.w],
                        bx: params[gi.wx.b],
                        wg: params[gi.wg.w],
                        bg: params[gi.wg.b],
                        psi_w: params[gi.psi.w],
                        psi_b: params[gi.psi.b],
                    };
                    attention_gate(tape, skips[l], h, &gp)?
                }
                None => skips[l],
            };
            let cat = tape.concat_channels(skip, up)?;
            h = double(tape, dec.block, cat)?;
        }
        let logit = conv(tape, self.layout.head, h, 0)?;
        let logit = tape.clamp(logit, -LOGIT_LIMIT, LOGIT_LIMIT)?;
        Ok(tape.sigmoid(logit)?)
    }

    /// Inference forward pass on a fresh tape.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let y = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Build the network described by `cfg` with seeded He initialization:
/// weights `~ Normal(0, sqrt(2 / fan_in))`, biases zero.
pub fn build_unet(cfg: &ModelConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    let (layout, specs) = layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut params = Vec::with_capacity(specs.len());
    for s in specs {
        let t = match s.fan_in {
            Some(fan_in) => {
                let normal = Normal::new(0.0f32, sqrt(2.0 / fan_in as f64) as f32).expect("positive std");
                Tensor::from_fn(s.shape, |_| normal.sample(&mut rng))
            }
            None => Tensor::zeros(s.shape),
        };
        names.push(s.name);
        params.push(t);
    }
    Ok(Model { cfg: cfg.clone(), names, params, layout })
}

pub fn count_parameters(m: &Model) -> usize {
    m.params.iter().map(Tensor::len).sum()
}
