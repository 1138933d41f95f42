//! Frozen embedding backbone, CAIM insertion plans and the gated forward pass.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caim::{count_block_cost, BoundCaimBlock, CaimBlock, Gate};
use crate::error::{Error, Result};
use crate::style_norm::{self, UnconditionalVariant, DEFAULT_EPSILON};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::Adam;

/// Geometry of the toy backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub resolution: usize,
    /// Output channels of each 3×3 stride-2 stage.
    pub stage_channels: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            in_channels: 3,
            resolution: 32,
            stage_channels: vec![16, 32, 64, 128, 128],
            embedding_dim: 64,
        }
    }
}

impl BackboneSpec {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// (C, H, W) of the feature map after 1-based stage `i`.
    pub fn stage_output(&self, i: usize) -> (usize, usize, usize) {
        let mut side = self.resolution;
        for _ in 0..i {
            side = (side + 2 - 3) / 2 + 1;
        }
        (self.stage_channels[i - 1], side, side)
    }

    fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::invalid("backbone needs at least one non-empty stage"));
        }
        if self.in_channels == 0 || self.resolution == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid("backbone dimensions must be positive"));
        }
        Ok(())
    }
}

/// Which input domain an image comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Source,
    Target,
}

impl Modality {
    pub fn gate(self) -> Gate {
        match self {
            Modality::Source => Gate::Closed,
            Modality::Target => Gate::Open,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Stacked conv-ReLU stages followed by GAP, a dense projection and L2
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    spec: BackboneSpec,
    pub stages: Vec<ConvStage>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    frozen: bool,
}

struct BoundBackbone {
    stages: Vec<(Var, Var)>,
    head: (Var, Var),
}

impl FrozenBackbone {
    /// Randomly initialised, trainable (not yet frozen) backbone.
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::new();
        let mut c_in = spec.in_channels;
        for &c_out in &spec.stage_channels {
            let fan_in = (c_in * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = (0..c_out * c_in * 9).map(|_| rng.random_range(-bound..bound)).collect();
            stages.push(ConvStage {
                weight: Tensor::new([c_out, c_in, 3, 3], w)?.with_grad(),
                bias: Tensor::zeros([c_out]).with_grad(),
            });
            c_in = c_out;
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let hw = (0..spec.embedding_dim * c_in).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(FrozenBackbone {
            head_weight: Tensor::new([spec.embedding_dim, c_in], hw)?.with_grad(),
            head_bias: Tensor::zeros([spec.embedding_dim]).with_grad(),
            spec,
            stages,
            frozen: false,
        })
    }

    /// Assembles a backbone from stored tensors; the result is frozen.
    pub fn from_parts(spec: BackboneSpec, stages: Vec<ConvStage>, head_weight: Tensor, head_bias: Tensor) -> Result<Self> {
        spec.validate()?;
        let mut reference = FrozenBackbone::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if stages.len() != reference.stages.len() {
            return Err(Error::shape(
                "backbone",
                format!("{} stages stored, spec has {}", stages.len(), reference.stages.len()),
            ));
        }
        for (i, (s, r)) in stages.iter().zip(&reference.stages).enumerate() {
            if s.weight.shape() != r.weight.shape() || s.bias.shape() != r.bias.shape() {
                return Err(Error::shape("backbone", format!("stage {} has wrong shapes", i + 1)));
            }
        }
        if head_weight.shape() != reference.head_weight.shape() || head_bias.shape() != reference.head_bias.shape() {
            return Err(Error::shape("backbone", "head has wrong shapes"));
        }
        reference.stages = stages;
        reference.head_weight = head_weight;
        reference.head_bias = head_bias;
        reference.freeze();
        Ok(reference)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Clears every `requires_grad` flag and marks the backbone frozen.
    pub fn freeze(&mut self) {
        for p in self.parameters_mut() {
            p.set_requires_grad(false);
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        for p in self.parameters_mut() {
            p.set_requires_grad(true);
        }
        self.frozen = false;
    }

    /// Named parameters: `stage<i>/weight`, `stage<i>/bias`, `head/weight`, `head/bias`.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}/weight", i + 1), &s.weight));
            out.push((format!("stage{}/bias", i + 1), &s.bias));
        }
        out.push(("head/weight".into(), &self.head_weight));
        out.push(("head/bias".into(), &self.head_bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Parameters and per-sample FLOPs (2 per MAC over convolutions and the head).
    pub fn cost(&self) -> (u64, u64) {
        let mut flops = 0u64;
        let mut c_in = self.spec.in_channels;
        for i in 1..=self.spec.num_stages() {
            let (c, h, w) = self.spec.stage_output(i);
            flops += 2 * (9 * c_in * c * h * w) as u64;
            c_in = c;
        }
        flops += 2 * (c_in * self.spec.embedding_dim) as u64;
        (self.num_parameters() as u64, flops)
    }

    /// Validates an image batch and replicates single-channel inputs.
    ///
    /// Accepts C×H×W or N×C×H×W with C ∈ {1, `in_channels`}.
    pub fn prepare_input(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = match *images.shape() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape("embed", format!("expected an image or image batch, got {s:?}"))),
        };
        let r = self.spec.resolution;
        if h != r || w != r {
            return Err(Error::shape("embed", format!("resolution {h}×{w}, expected {r}×{r}")));
        }
        let want = self.spec.in_channels;
        if c == want {
            return images.clone().reshape([n, c, h, w]);
        }
        if c != 1 {
            return Err(Error::shape("embed", format!("{c} channels, expected 1 or {want}")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * want * plane);
        for img in images.data().chunks(plane) {
            for _ in 0..want {
                data.extend_from_slice(img);
            }
        }
        Tensor::new([n, want, h, w], data)
    }

    fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            stages: self
                .stages
                .iter()
                .map(|s| (tape.leaf(&s.weight), tape.leaf(&s.bias)))
                .collect(),
            head: (tape.leaf(&self.head_weight), tape.leaf(&self.head_bias)),
        }
    }

    fn stage(tape: &mut Tape, bound: &BoundBackbone, i: usize, x: Var) -> Result<Var> {
        let (w, b) = bound.stages[i];
        let y = tape.conv2d(x, w, b, 2, 1)?;
        Ok(tape.relu(y))
    }

    /// Pre-normalization head output.
    fn head_features(tape: &mut Tape, bound: &BoundBackbone, x: Var) -> Result<Var> {
        let pooled = tape.global_average_pool(x)?;
        tape.dense(pooled, bound.head.0, bound.head.1)
    }

    /// Unit-norm embeddings of the bare backbone, N×D.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let input = self.prepare_input(images)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut x = tape.constant(input);
        for i in 0..self.stages.len() {
            x = Self::stage(&mut tape, &bound, i, x)?;
        }
        let f = Self::head_features(&mut tape, &bound, x)?;
        let e = tape.l2_normalize_rows(f)?;
        Ok(tape.tensor(e))
    }
}

/// 1-based stage indices after which a CAIM block is inserted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct InsertionPlan {
    positions: Vec<usize>,
}

impl TryFrom<Vec<usize>> for InsertionPlan {
    type Error = Error;

    fn try_from(positions: Vec<usize>) -> Result<Self> {
        if positions.contains(&0) {
            return Err(Error::invalid("insertion positions are 1-based"));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "insertion positions must be strictly increasing, got {positions:?}"
            )));
        }
        Ok(InsertionPlan { positions })
    }
}

impl From<InsertionPlan> for Vec<usize> {
    fn from(p: InsertionPlan) -> Self {
        p.positions
    }
}

impl Default for InsertionPlan {
    fn default() -> Self {
        InsertionPlan {
            positions: vec![1, 2, 3],
        }
    }
}

impl InsertionPlan {
    pub fn new(positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = positions.into_iter().collect();
        Self::try_from(set.into_iter().collect::<Vec<_>>())
    }

    pub fn empty() -> Self {
        InsertionPlan { positions: Vec::new() }
    }

    /// `{1, …, k}`.
    pub fn prefix(k: usize) -> Self {
        InsertionPlan {
            positions: (1..=k).collect(),
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Short label such as `1-3`, `1,3` or `none`.
    pub fn label(&self) -> String {
        match self.positions.as_slice() {
            [] => "none".into(),
            [p] => p.to_string(),
            ps if ps.windows(2).all(|w| w[1] == w[0] + 1) => format!("{}-{}", ps[0], ps[ps.len() - 1]),
            ps => ps.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","),
        }
    }

    fn check(&self, n_stages: usize) -> Result<()> {
        if let Some(&p) = self.positions.iter().find(|&&p| p > n_stages) {
            return Err(Error::invalid(format!(
                "insertion position {p} outside 1..={n_stages}"
            )));
        }
        Ok(())
    }
}

/// How the inserted blocks are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Gated residual modulation, active for the target modality only.
    Conditional,
    /// The same transform for both modalities, no gate, no residual.
    Unconditional(UnconditionalVariant),
}

/// Backbone plus inserted blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HfrNetwork {
    backbone: FrozenBackbone,
    plan: InsertionPlan,
    pub blocks: Vec<CaimBlock>,
    conditioning: Conditioning,
}

/// Network parameters recorded on a tape.
pub struct BoundNetwork {
    backbone: BoundBackbone,
    pub blocks: Vec<BoundCaimBlock>,
}

/// Parameter/FLOP totals of a network relative to its bare backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkCost {
    pub backbone_params: u64,
    pub backbone_flops: u64,
    pub total_params: u64,
    pub total_flops: u64,
    pub params_overhead_percent: f64,
    pub flops_overhead_percent: f64,
}

/// Inserts freshly initialised blocks into a frozen backbone.
pub fn insert_caim(backbone: FrozenBackbone, plan: InsertionPlan, seed: u64) -> Result<HfrNetwork> {
    HfrNetwork::with_conditioning(backbone, plan, seed, Conditioning::Conditional)
}

impl HfrNetwork {
    pub fn with_conditioning(backbone: FrozenBackbone, plan: InsertionPlan, seed: u64, conditioning: Conditioning) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Contract("CAIM blocks can only be inserted into a frozen backbone".into()));
        }
        plan.check(backbone.spec.num_stages())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = plan
            .positions
            .iter()
            .map(|&p| CaimBlock::new(backbone.spec.stage_output(p).0, &mut rng))
            .collect();
        Ok(HfrNetwork {
            backbone,
            plan,
            blocks,
            conditioning,
        })
    }

    /// Replaces the blocks, checking that they match the plan's channels.
    pub fn set_blocks(&mut self, blocks: Vec<CaimBlock>) -> Result<()> {
        if blocks.len() != self.plan.positions.len() {
            return Err(Error::invalid(format!(
                "{} blocks for a plan with {} positions",
                blocks.len(),
                self.plan.positions.len()
            )));
        }
        for (b, &p) in blocks.iter().zip(&self.plan.positions) {
            let c = self.backbone.spec.stage_output(p).0;
            if b.channels() != c {
                return Err(Error::shape(
                    "set_blocks",
                    format!("block at position {p} has {} channels, expected {c}", b.channels()),
                ));
            }
        }
        self.blocks = blocks;
        Ok(())
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    /// Mutable access for tooling; training rejects a backbone left unfrozen.
    pub fn backbone_mut(&mut self) -> &mut FrozenBackbone {
        &mut self.backbone
    }

    pub fn plan(&self) -> &InsertionPlan {
        &self.plan
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    /// True when source-modality inputs bypass every block.
    pub fn preserves_source_path(&self) -> bool {
        self.conditioning == Conditioning::Conditional || self.plan.is_empty()
    }

    /// Parameters the optimizer may touch.
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        if self.conditioning == Conditioning::Unconditional(UnconditionalVariant::InstanceNorm) {
            return Vec::new();
        }
        self.blocks.iter_mut().flat_map(|b| b.parameters_mut()).collect()
    }

    pub fn num_trainable_parameters(&self) -> usize {
        if self.conditioning == Conditioning::Unconditional(UnconditionalVariant::InstanceNorm) {
            return 0;
        }
        self.blocks.iter().map(|b| b.num_parameters()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork {
        BoundNetwork {
            backbone: self.backbone.bind(tape),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
        }
    }

    /// Embeds an N×3×H×W batch on `tape`, returning unit-norm N×D rows.
    pub fn embed_on_tape(&self, tape: &mut Tape, bound: &BoundNetwork, images: Var, modality: Modality) -> Result<Var> {
        let mut x = images;
        let mut next_block = 0;
        for i in 0..self.backbone.stages.len() {
            x = FrozenBackbone::stage(tape, &bound.backbone, i, x)?;
            if self.plan.positions.get(next_block) == Some(&(i + 1)) {
                let block = &bound.blocks[next_block];
                x = match self.conditioning {
                    Conditioning::Conditional => block.forward(tape, x, modality.gate())?,
                    Conditioning::Unconditional(v) => {
                        style_norm::unconditional_forward(tape, x, v, Some(block), DEFAULT_EPSILON)?
                    }
                };
                next_block += 1;
            }
        }
        let f = FrozenBackbone::head_features(tape, &bound.backbone, x)?;
        tape.l2_normalize_rows(f)
    }

    /// Unit-norm embeddings for an image or image batch of one modality.
    pub fn embed(&self, images: &Tensor, modality: Modality) -> Result<Tensor> {
        let input = self.backbone.prepare_input(images)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(input);
        let e = self.embed_on_tape(&mut tape, &bound, x, modality)?;
        Ok(tape.tensor(e))
    }

    pub fn cost(&self) -> NetworkCost {
        let (bp, bf) = self.backbone.cost();
        let (mut params, mut flops) = (bp, bf);
        for &p in &self.plan.positions {
            let (c, h, w) = self.backbone.spec.stage_output(p);
            let cost = count_block_cost(c, h, w);
            params += cost.params;
            flops += cost.flops;
        }
        NetworkCost {
            backbone_params: bp,
            backbone_flops: bf,
            total_params: params,
            total_flops: flops,
            params_overhead_percent: 100.0 * (params - bp) as f64 / bp as f64,
            flops_overhead_percent: 100.0 * (flops - bf) as f64 / bf as f64,
        }
    }
}

/// Settings for supervised source-modality pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub backbone: BackboneSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            backbone: BackboneSpec::default(),
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Trains backbone + temporary softmax head, then drops the head and freezes.
///
/// `images` is N×C×H×W, `labels` holds class indices; returns the frozen
/// backbone and the per-epoch mean cross-entropy.
pub fn pretrain_backbone(images: &Tensor, labels: &[usize], config: &PretrainConfig) -> Result<(FrozenBackbone, Vec<f64>)> {
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two identities"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let class_index: Vec<usize> = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).expect("label in set"))
        .collect();
    let n_classes = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut backbone = FrozenBackbone::new(config.backbone.clone(), &mut rng)?;
    let input = backbone.prepare_input(images)?;
    if input.shape()[0] != labels.len() {
        return Err(Error::shape(
            "pretrain_backbone",
            format!("{} images for {} labels", input.shape()[0], labels.len()),
        ));
    }
    let d = config.backbone.embedding_dim;
    let bound = 1.0 / (d as f64).sqrt();
    let cls = (0..n_classes * d).map(|_| rng.random_range(-bound..bound)).collect();
    let mut cls_weight = Tensor::new([n_classes, d], cls)?.with_grad();
    let mut cls_bias = Tensor::zeros([n_classes]).with_grad();
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = gather_rows(&input, batch);
            let y: Vec<usize> = batch.iter().map(|&i| class_index[i]).collect();
            let mut tape = Tape::new();
            let bb = backbone.bind(&mut tape);
            let cw = tape.leaf(&cls_weight);
            let cb = tape.leaf(&cls_bias);
            let mut h = tape.constant(x);
            for i in 0..backbone.stages.len() {
                h = FrozenBackbone::stage(&mut tape, &bb, i, h)?;
            }
            let f = FrozenBackbone::head_features(&mut tape, &bb, h)?;
            let logits = tape.dense(f, cw, cb)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            total += tape.value(loss)[0] * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let mut vars: Vec<Var> = bb.stages.iter().flat_map(|&(w, b)| [w, b]).collect();
            vars.extend([bb.head.0, bb.head.1, cw, cb]);
            let mut params = backbone.parameters_mut();
            params.push(&mut cls_weight);
            params.push(&mut cls_bias);
            for (v, p) in vars.iter().zip(params.iter_mut()) {
                grads.write_to(*v, p)?;
            }
            adam.step(&mut params)?;
        }
        history.push(total / labels.len() as f64);
    }
    backbone.freeze();
    Ok((backbone, history))
}

/// Selects leading-axis rows of `t` in the given order.
pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row gather keeps shape consistent")
}
