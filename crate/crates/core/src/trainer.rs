//! Siamese contrastive training of the inserted blocks.
//!
//! Pair labels follow the contrastive-loss convention `y = 0` for a genuine
//! (same identity) pair and `y = 1` for an impostor pair:
//!
//! ```text
//! L = mean over pairs of (1 − y) · ½ D² + y · ½ max(0, m − D)²
//! ```
//!
//! Every pair is (source image, target image). With a conditional network
//! the source branch never touches a trainable parameter, so its embeddings
//! are computed once per run and reused.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{gather_rows, Conditioning, HfrNetwork, Modality};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `‖e_s − e_t‖₂`.
    Euclidean,
    /// `1 − ⟨e_s, e_t⟩` for unit-norm embeddings.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub distance: Distance,
    pub seed: u64,
    pub genuine_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 2.0,
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 90,
            distance: Distance::Euclidean,
            seed: 0,
            genuine_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.genuine_fraction > 0.0 && self.genuine_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "genuine fraction must lie in (0, 1), got {}",
                self.genuine_fraction
            )));
        }
        Ok(())
    }
}

/// Mean contrastive loss over aligned N×D embedding batches.
pub fn contrastive_loss(tape: &mut Tape, e_s: Var, e_t: Var, labels: &[u8], margin: f64, distance: Distance) -> Result<Var> {
    let n = match *tape.shape(e_s) {
        [n, _] => n,
        ref s => return Err(Error::shape("contrastive_loss", format!("expected N×D embeddings, got {s:?}"))),
    };
    if tape.shape(e_t) != tape.shape(e_s) {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{:?} vs {:?}", tape.shape(e_s), tape.shape(e_t)),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape("contrastive_loss", format!("{} labels for {n} pairs", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid(format!("pair label must be 0 or 1, got {bad}")));
    }
    let genuine_mask: Vec<f64> = labels.iter().map(|&y| 0.5 * (1 - y) as f64).collect();
    let impostor_mask: Vec<f64> = labels.iter().map(|&y| 0.5 * y as f64).collect();
    let (d, d_sq) = match distance {
        Distance::Euclidean => {
            let diff = tape.sub(e_s, e_t)?;
            let sq = tape.square(diff);
            let d_sq = tape.row_sum(sq)?;
            (tape.sqrt(d_sq), d_sq)
        }
        Distance::Cosine => {
            let prod = tape.mul(e_s, e_t)?;
            let dot = tape.row_sum(prod)?;
            let neg = tape.scale(dot, -1.0);
            let d = tape.add_scalar(neg, 1.0);
            (d, tape.square(d))
        }
    };
    let pull = tape.mul_const(d_sq, genuine_mask)?;
    let neg_d = tape.scale(d, -1.0);
    let slack = tape.add_scalar(neg_d, margin);
    let hinge = tape.relu(slack);
    let hinge_sq = tape.square(hinge);
    let push = tape.mul_const(hinge_sq, impostor_mask)?;
    let per_pair = tape.add(pull, push)?;
    tape.mean(per_pair)
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Restores a saved optimizer state.
    pub fn from_state(learning_rate: f64, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::invalid("Adam moment buffers disagree in shape"));
        }
        Ok(Adam {
            step,
            first,
            second,
            ..Adam::new(learning_rate)
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Applies one update using each parameter's stored gradient; a missing
    /// gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() && self.step == 0 {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::shape(
                "adam_step",
                "parameter list does not match the optimizer state".to_string(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Genuine,
    Impostor,
}

impl PairLabel {
    /// Contrastive-loss label: 0 genuine, 1 impostor.
    pub fn y(self) -> u8 {
        match self {
            PairLabel::Genuine => 0,
            PairLabel::Impostor => 1,
        }
    }
}

/// A cross-modality pair as indices into [`TrainingSet`] rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: usize,
    pub target: usize,
    pub label: PairLabel,
}

/// Prepared training images of both modalities with identity labels.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Ns×3×H×W.
    pub source_images: Tensor,
    pub source_ids: Vec<usize>,
    /// Nt×3×H×W.
    pub target_images: Tensor,
    pub target_ids: Vec<usize>,
}

impl TrainingSet {
    pub fn identities(&self) -> BTreeSet<usize> {
        self.target_ids.iter().chain(&self.source_ids).copied().collect()
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Batches of cross-modality pairs for one epoch.
///
/// An epoch visits every genuine (source, target) combination of each
/// identity once, in shuffled order. Each batch holds
/// `round(fraction · batch_size)` genuine pairs followed by impostor pairs;
/// impostors cycle through the target samples and draw their source identity
/// uniformly from the other identities. The last batch is filled by wrapping
/// around. Deterministic in `(seed, epoch)`.
pub fn make_pairs(
    source_ids: &[usize],
    target_ids: &[usize],
    batch_size: usize,
    genuine_fraction: f64,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<Pair>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in source_ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    if ids.len() < 2 {
        return Err(Error::invalid("pairing needs at least two identities"));
    }
    if target_ids.is_empty() {
        return Err(Error::invalid("pairing needs target samples"));
    }
    if let Some(id) = target_ids.iter().find(|id| !by_id.contains_key(id)) {
        return Err(Error::invalid(format!("target identity {id} has no source sample")));
    }
    let n_genuine = (genuine_fraction * batch_size as f64).round() as usize;
    if n_genuine == 0 || n_genuine >= batch_size {
        return Err(Error::invalid(format!(
            "genuine fraction {genuine_fraction} leaves no room for both pair kinds in a batch of {batch_size}"
        )));
    }
    let n_impostor = batch_size - n_genuine;
    let mut rng = epoch_rng(seed, epoch);
    let mut genuine: Vec<(usize, usize)> = target_ids
        .iter()
        .enumerate()
        .flat_map(|(t, id)| by_id[id].iter().map(move |&s| (s, t)))
        .collect();
    genuine.shuffle(&mut rng);
    let mut impostor_order: Vec<usize> = (0..target_ids.len()).collect();
    impostor_order.shuffle(&mut rng);
    let n_batches = genuine.len().div_ceil(n_genuine);
    let mut batches = Vec::with_capacity(n_batches);
    let (mut gi, mut ii) = (0, 0);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..n_genuine {
            let (source, t) = genuine[gi % genuine.len()];
            gi += 1;
            batch.push(Pair {
                source,
                target: t,
                label: PairLabel::Genuine,
            });
        }
        for _ in 0..n_impostor {
            let t = impostor_order[ii % impostor_order.len()];
            ii += 1;
            let own = target_ids[t];
            let pick = rng.random_range(0..ids.len() - 1);
            let other = ids.iter().copied().filter(|&id| id != own).nth(pick).expect("two identities");
            let source = *by_id[&other].choose(&mut rng).expect("non-empty");
            batch.push(Pair {
                source,
                target: t,
                label: PairLabel::Impostor,
            });
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Optimizer state and history, enough to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: Adam,
    pub history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            epochs_done: 0,
            adam: Adam::new(config.learning_rate),
            history: Vec::new(),
        }
    }
}

/// Sorted distinct rows plus, for every input row, its slot among them.
fn dedup_rows(rows: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut unique = rows.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let slot = rows
        .iter()
        .map(|r| unique.binary_search(r).expect("row present"))
        .collect();
    (unique, slot)
}

/// Trains the network's blocks from scratch state.
pub fn train(net: &mut HfrNetwork, data: &TrainingSet, config: &TrainConfig) -> Result<TrainState> {
    train_from(net, data, config, TrainState::new(config), |_, _| Ok(()))
}

/// Continues training from `state`, calling `on_epoch` after every epoch.
pub fn train_from(
    net: &mut HfrNetwork,
    data: &TrainingSet,
    config: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&HfrNetwork, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if !net.backbone().is_frozen() || net.backbone().named_parameters().iter().any(|(_, p)| p.requires_grad()) {
        return Err(Error::Contract("training requires a frozen backbone".into()));
    }
    let backbone = net.backbone();
    let source_images = backbone.prepare_input(&data.source_images)?;
    let target_images = backbone.prepare_input(&data.target_images)?;
    if source_images.shape()[0] != data.source_ids.len() || target_images.shape()[0] != data.target_ids.len() {
        return Err(Error::shape("train", "image counts and identity labels disagree"));
    }
    let cached_source = match net.conditioning() {
        Conditioning::Conditional => Some(net.embed(&source_images, Modality::Source)?),
        Conditioning::Unconditional(_) => None,
    };
    let trainable = net.num_trainable_parameters() > 0;
    for epoch in state.epochs_done..config.epochs {
        let batches = make_pairs(
            &data.source_ids,
            &data.target_ids,
            config.batch_size,
            config.genuine_fraction,
            config.seed,
            epoch,
        )?;
        let mut total = 0.0;
        for batch in &batches {
            let src_rows: Vec<usize> = batch.iter().map(|p| p.source).collect();
            let tgt_rows: Vec<usize> = batch.iter().map(|p| p.target).collect();
            let labels: Vec<u8> = batch.iter().map(|p| p.label.y()).collect();
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let e_s = match &cached_source {
                Some(cache) => tape.constant(gather_rows(cache, &src_rows)),
                None => {
                    let (unique, slot) = dedup_rows(&src_rows);
                    let x = tape.constant(gather_rows(&source_images, &unique));
                    let e = net.embed_on_tape(&mut tape, &bound, x, Modality::Source)?;
                    tape.gather_rows(e, &slot)?
                }
            };
            // Embed each distinct target image once, then expand to pair order.
            let (unique, slot) = dedup_rows(&tgt_rows);
            let x_t = tape.constant(gather_rows(&target_images, &unique));
            let e_unique = net.embed_on_tape(&mut tape, &bound, x_t, Modality::Target)?;
            let e_t = tape.gather_rows(e_unique, &slot)?;
            let loss = contrastive_loss(&mut tape, e_s, e_t, &labels, config.margin, config.distance)?;
            total += tape.value(loss)[0];
            if !trainable {
                continue;
            }
            let grads = tape.backward(loss)?;
            let vars: Vec<Var> = bound.blocks.iter().flat_map(|b| b.vars()).collect();
            let mut params = net.trainable_parameters_mut();
            for (v, p) in vars.iter().zip(params.iter_mut()) {
                grads.write_to(*v, p)?;
            }
            state.adam.step(&mut params)?;
        }
        state.history.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: total / batches.len() as f64,
        });
        state.epochs_done = epoch + 1;
        on_epoch(net, &state)?;
    }
    Ok(state)
}
