//! Conditional adaptive instance modulation block.
//!
//! For an input feature map `F` the block computes
//!
//! ```text
//! xi      = GAP(relu(conv2(relu(conv1(F)))))     style code, N×C
//! sigma_f = fc_sigma(xi),  mu_f = fc_mu(xi)      modulation heads, N×C
//! AIM(F)  = sigma_f · (F − μ(F)) / σ(F) + mu_f
//! CAIM(F, g) = g · AIM(F) + F
//! ```
//!
//! The style CNN reads the raw feature map; only the modulated branch is
//! normalized. Both convolutions are 3×3, stride 1, padding 1 and keep C
//! channels. With the gate closed the branch is skipped entirely, so the
//! output is the input bit for bit and no gradient reaches the block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style_norm::{self, DEFAULT_EPSILON};
use crate::tape::{Tape, Var};
use crate::tensor::{Dims4, Tensor};

/// Binary modality gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    /// g = 0: source modality, block is a pass-through.
    Closed,
    /// g = 1: target modality, modulation is applied.
    Open,
}

impl Gate {
    pub fn value(self) -> u8 {
        match self {
            Gate::Closed => 0,
            Gate::Open => 1,
        }
    }

    pub fn from_value(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Gate::Closed),
            1 => Ok(Gate::Open),
            _ => Err(Error::invalid(format!("gate must be 0 or 1, got {v}"))),
        }
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1_weight",
    "conv1_bias",
    "conv2_weight",
    "conv2_bias",
    "fc_sigma_weight",
    "fc_sigma_bias",
    "fc_mu_weight",
    "fc_mu_bias",
];

/// Trainable parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct CaimBlock {
    channels: usize,
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub fc_sigma_weight: Tensor,
    pub fc_sigma_bias: Tensor,
    pub fc_mu_weight: Tensor,
    pub fc_mu_bias: Tensor,
    pub epsilon: f64,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent shape").with_grad()
}

impl CaimBlock {
    /// Fan-in uniform initialisation; the two head biases start at zero.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        let conv_bound = 1.0 / ((9 * c) as f64).sqrt();
        let fc_bound = 1.0 / (c as f64).sqrt();
        CaimBlock {
            channels: c,
            conv1_weight: uniform(&[c, c, 3, 3], conv_bound, rng),
            conv1_bias: uniform(&[c], conv_bound, rng),
            conv2_weight: uniform(&[c, c, 3, 3], conv_bound, rng),
            conv2_bias: uniform(&[c], conv_bound, rng),
            fc_sigma_weight: uniform(&[c, c], fc_bound, rng),
            fc_sigma_bias: Tensor::zeros([c]).with_grad(),
            fc_mu_weight: uniform(&[c, c], fc_bound, rng),
            fc_mu_bias: Tensor::zeros([c]).with_grad(),
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// A block whose every parameter is zero.
    pub fn zeros(channels: usize) -> Self {
        let c = channels;
        let z = |shape: &[usize]| Tensor::zeros(shape).with_grad();
        CaimBlock {
            channels: c,
            conv1_weight: z(&[c, c, 3, 3]),
            conv1_bias: z(&[c]),
            conv2_weight: z(&[c, c, 3, 3]),
            conv2_bias: z(&[c]),
            fc_sigma_weight: z(&[c, c]),
            fc_sigma_bias: z(&[c]),
            fc_mu_weight: z(&[c, c]),
            fc_mu_bias: z(&[c]),
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Rebuilds a block from named tensors, checking every shape.
    pub fn from_parts(channels: usize, mut parts: Vec<Tensor>) -> Result<Self> {
        if parts.len() != PARAM_NAMES.len() {
            return Err(Error::invalid(format!("expected 8 block tensors, got {}", parts.len())));
        }
        let expected = Self::zeros(channels);
        for ((p, e), name) in parts.iter_mut().zip(expected.parameters()).zip(PARAM_NAMES) {
            if p.shape() != e.shape() {
                return Err(Error::shape(
                    "caim_block",
                    format!("{name}: {:?}, expected {:?} for C={channels}", p.shape(), e.shape()),
                ));
            }
            p.set_requires_grad(true);
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(CaimBlock {
            channels,
            conv1_weight: next(),
            conv1_bias: next(),
            conv2_weight: next(),
            conv2_bias: next(),
            fc_sigma_weight: next(),
            fc_sigma_bias: next(),
            fc_mu_weight: next(),
            fc_mu_bias: next(),
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn parameters(&self) -> [&Tensor; 8] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
            &self.fc_sigma_weight,
            &self.fc_sigma_bias,
            &self.fc_mu_weight,
            &self.fc_mu_bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.fc_sigma_weight,
            &mut self.fc_sigma_bias,
            &mut self.fc_mu_weight,
            &mut self.fc_mu_bias,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Records the parameters on a tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundCaimBlock {
        let [c1w, c1b, c2w, c2b, fsw, fsb, fmw, fmb] = self.parameters().map(|p| tape.leaf(p));
        BoundCaimBlock {
            channels: self.channels,
            epsilon: self.epsilon,
            conv1_weight: c1w,
            conv1_bias: c1b,
            conv2_weight: c2w,
            conv2_bias: c2b,
            fc_sigma_weight: fsw,
            fc_sigma_bias: fsb,
            fc_mu_weight: fmw,
            fc_mu_bias: fmb,
        }
    }
}

/// N×C style code `xi`.
#[derive(Debug, Clone, Copy)]
pub struct StyleCode(pub Var);

/// Per-sample, per-channel scale and shift predicted from the style code.
#[derive(Debug, Clone, Copy)]
pub struct ModulationParams {
    pub sigma: Var,
    pub mu: Var,
}

/// A [`CaimBlock`] whose parameters live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundCaimBlock {
    channels: usize,
    epsilon: f64,
    conv1_weight: Var,
    conv1_bias: Var,
    conv2_weight: Var,
    conv2_bias: Var,
    fc_sigma_weight: Var,
    fc_sigma_bias: Var,
    fc_mu_weight: Var,
    fc_mu_bias: Var,
}

impl BoundCaimBlock {
    /// Tape handles in [`PARAM_NAMES`] order.
    pub fn vars(&self) -> [Var; 8] {
        [
            self.conv1_weight,
            self.conv1_bias,
            self.conv2_weight,
            self.conv2_bias,
            self.fc_sigma_weight,
            self.fc_sigma_bias,
            self.fc_mu_weight,
            self.fc_mu_bias,
        ]
    }

    fn check_channels(&self, tape: &Tape, f: Var, op: &'static str) -> Result<()> {
        let d = Dims4::of(op, tape.shape(f))?;
        if d.c != self.channels {
            return Err(Error::shape(
                op,
                format!("block has {} channels, feature map {:?}", self.channels, tape.shape(f)),
            ));
        }
        Ok(())
    }

    pub fn style_features(&self, tape: &mut Tape, f: Var) -> Result<StyleCode> {
        self.check_channels(tape, f, "style_features")?;
        let h = tape.conv2d(f, self.conv1_weight, self.conv1_bias, 1, 1)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, self.conv2_weight, self.conv2_bias, 1, 1)?;
        let h = tape.relu(h);
        Ok(StyleCode(tape.global_average_pool(h)?))
    }

    pub fn modulation_params(&self, tape: &mut Tape, xi: StyleCode) -> Result<ModulationParams> {
        let sigma = tape.dense(xi.0, self.fc_sigma_weight, self.fc_sigma_bias)?;
        let mu = tape.dense(xi.0, self.fc_mu_weight, self.fc_mu_bias)?;
        Ok(ModulationParams { sigma, mu })
    }

    /// `sigma_f · IN(F) + mu_f`, with both heads driven by `F` itself.
    pub fn aim(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let xi = self.style_features(tape, f)?;
        let m = self.modulation_params(tape, xi)?;
        let normed = style_norm::normalize(tape, f, self.epsilon)?;
        let scaled = tape.mul_channel(normed, m.sigma)?;
        tape.add_channel(scaled, m.mu)
    }

    pub fn forward(&self, tape: &mut Tape, f: Var, gate: Gate) -> Result<Var> {
        self.check_channels(tape, f, "caim_forward")?;
        match gate {
            Gate::Closed => Ok(f),
            Gate::Open => {
                let branch = self.aim(tape, f)?;
                tape.add(branch, f)
            }
        }
    }
}

/// Parameter and FLOP count of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub params: u64,
    pub flops: u64,
}

/// Cost of one block on a C×h×w feature map, for a single sample.
///
/// FLOPs count 2 per multiply-accumulate: the two 3×3 convolutions
/// (`9C²` MACs per output pixel each), the two C→C heads (`C²` MACs each)
/// and the scale-and-shift (one MAC per element). Normalization statistics,
/// ReLU, pooling, bias additions and the residual add are not counted.
pub fn count_block_cost(channels: usize, h: usize, w: usize) -> BlockCost {
    let c = channels as u64;
    let hw = (h * w) as u64;
    let params = 2 * (9 * c * c + c) + 2 * (c * c + c);
    let conv = 2 * (2 * 9 * c * c * hw);
    let dense = 2 * (2 * c * c);
    let modulation = 2 * c * hw;
    BlockCost {
        params,
        flops: conv + dense + modulation,
    }
}

/// FLOPs of the convolution part alone (see [`count_block_cost`]).
pub fn conv_flops(channels: usize, h: usize, w: usize) -> u64 {
    let c = channels as u64;
    2 * (2 * 9 * c * c * (h * w) as u64)
}
