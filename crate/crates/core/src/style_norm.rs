//! Instance normalization, AdaIN and the unconditional modulation variants.
//!
//! Statistics are per sample and per channel over H×W, with population
//! variance and `epsilon` added inside the square root.

use crate::caim::BoundCaimBlock;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Dims4, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel affine parameters of an instance-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    affine: bool,
}

impl InstanceNormParams {
    /// gamma ≡ 1, beta ≡ 0, neither trainable.
    pub fn affine_free(channels: usize) -> Self {
        InstanceNormParams {
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            affine: false,
        }
    }

    /// Trainable gamma/beta initialised to the identity transform.
    pub fn learnable(channels: usize) -> Self {
        InstanceNormParams {
            gamma: Tensor::full([channels], 1.0).with_grad(),
            beta: Tensor::zeros([channels]).with_grad(),
            affine: true,
        }
    }

    pub fn with_values(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape(
                "instance_norm",
                format!("gamma has {} channels, beta {}", gamma.len(), beta.len()),
            ));
        }
        let c = gamma.len();
        Ok(InstanceNormParams {
            gamma: Tensor::new([c], gamma)?.with_grad(),
            beta: Tensor::new([c], beta)?.with_grad(),
            affine: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }
}

/// `(x − μ(x)) / σ(x)` without affine parameters.
pub fn normalize(tape: &mut Tape, x: Var, epsilon: f64) -> Result<Var> {
    let stats = tape.instance_stats(x, epsilon)?;
    let centered = tape.sub_channel(x, stats.mean)?;
    tape.div_channel(centered, stats.std)
}

/// `gamma · (x − μ(x)) / σ(x) + beta`.
pub fn instance_norm(tape: &mut Tape, x: Var, params: &InstanceNormParams, epsilon: f64) -> Result<Var> {
    let d = Dims4::of("instance_norm", tape.shape(x))?;
    if params.channels() != d.c {
        return Err(Error::shape(
            "instance_norm",
            format!("{} affine channels for a {}-channel input", params.channels(), d.c),
        ));
    }
    if !params.affine {
        return normalize(tape, x, epsilon);
    }
    let gamma = tape.leaf(&params.gamma);
    let beta = tape.leaf(&params.beta);
    instance_norm_affine(tape, x, gamma, beta, epsilon)
}

/// [`instance_norm`] with per-channel `gamma` and `beta` already on the tape.
pub fn instance_norm_affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
    let d = Dims4::of("instance_norm", tape.shape(x))?;
    if tape.shape(gamma) != [d.c] || tape.shape(beta) != [d.c] {
        return Err(Error::shape(
            "instance_norm",
            format!("affine {:?}/{:?} for a {}-channel input", tape.shape(gamma), tape.shape(beta), d.c),
        ));
    }
    let normed = normalize(tape, x, epsilon)?;
    let gamma = tape.repeat_rows(gamma, d.n)?;
    let beta = tape.repeat_rows(beta, d.n)?;
    let scaled = tape.mul_channel(normed, gamma)?;
    tape.add_channel(scaled, beta)
}

/// Re-styles `content` with the channel statistics of `style`.
///
/// Spatial extents may differ; batch sizes and channel counts must agree.
pub fn adain(tape: &mut Tape, content: Var, style: Var, epsilon: f64) -> Result<Var> {
    let c = Dims4::of("adain", tape.shape(content))?;
    let s = Dims4::of("adain", tape.shape(style))?;
    if c.c != s.c || c.n != s.n {
        return Err(Error::shape(
            "adain",
            format!("content {:?} vs style {:?}", tape.shape(content), tape.shape(style)),
        ));
    }
    let style_stats = tape.instance_stats(style, epsilon)?;
    let normed = normalize(tape, content, epsilon)?;
    let scaled = tape.mul_channel(normed, style_stats.std)?;
    tape.add_channel(scaled, style_stats.mean)
}

/// Which transform an unconditional block applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnconditionalVariant {
    /// Affine-free instance normalization.
    InstanceNorm,
    /// Adaptive instance modulation with the block's own heads.
    Aim,
}

/// Applies the variant to every input: no gate, no residual.
pub fn unconditional_forward(
    tape: &mut Tape,
    x: Var,
    variant: UnconditionalVariant,
    block: Option<&BoundCaimBlock>,
    epsilon: f64,
) -> Result<Var> {
    match variant {
        UnconditionalVariant::InstanceNorm => normalize(tape, x, epsilon),
        UnconditionalVariant::Aim => {
            let block = block.ok_or_else(|| Error::invalid("unconditional AIM requires a CAIM block"))?;
            block.aim(tape, x)
        }
    }
}
