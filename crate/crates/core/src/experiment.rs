//! End-to-end commands behind the `caim` binary.
//!
//! Every command reads an [`ExperimentConfig`] and works inside its output
//! directory:
//!
//! ```text
//! <out>/config.json                 effective configuration
//! <out>/data/                       dataset container + protocol.json
//! <out>/backbone.ckpt               pretrained, frozen backbone
//! <out>/pretrain_loss.csv
//! <out>/<train_dir>/fold<k>/        model.ckpt, state.ckpt, loss.csv
//! <out>/eval/                       metrics.json, metrics.csv
//! <out>/ablate/                     table.json, table.csv
//! <out>/cost/                       cost.json, cost.csv
//! ```
//!
//! Commands are deterministic: rerunning with the same configuration and
//! inputs rewrites byte-identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_folds, evaluate, vr_key, FoldReport, MetricRecord, Templates, AUC, EER, RANK1};
use crate::network::{
    pretrain_backbone, BackboneSpec, Conditioning, FrozenBackbone, HfrNetwork, InsertionPlan, Modality, NetworkCost,
    PretrainConfig,
};
use crate::style_norm::UnconditionalVariant;
use crate::synth::{
    generate_dataset, make_protocol, read_json, write_json, Dataset, DatasetConfig, Protocol, ProtocolSplit, Renderer,
    SampleRef,
};
use crate::tensor::Tensor;
use crate::trainer::{train_from, EpochLoss, TrainConfig, TrainState, TrainingSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_folds: usize,
    pub train_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_folds: 5,
            train_fraction: 25.0 / 60.0,
        }
    }
}

/// One JSON document describing a whole run.
///
/// `seed` is the single source of randomness: [`ExperimentConfig::resolved`]
/// copies it into the dataset, pretraining and training sections, and it
/// also seeds the protocol and block initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub pretrain: PretrainConfig,
    /// Extra source-modality renderings per identity used for pretraining.
    pub pretrain_views: usize,
    pub plan: InsertionPlan,
    pub train: TrainConfig,
    /// False-acceptance rates (percent) reported as VR@FAR columns.
    pub far_targets: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/reference"),
            dataset: DatasetConfig::default(),
            protocol: ProtocolConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_views: 10,
            plan: InsertionPlan::prefix(3),
            train: TrainConfig::default(),
            far_targets: vec![0.1, 1.0],
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Reads `path` (or the defaults), applies overrides and propagates the seed.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        Ok(cfg.resolved())
    }

    pub fn resolved(mut self) -> Self {
        self.dataset.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out_dir.join("backbone.ckpt")
    }

    fn backbone_spec(&self) -> &BackboneSpec {
        &self.pretrain.backbone
    }

    fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.far_targets.iter().any(|f| !(*f > 0.0 && *f <= 100.0)) {
            return Err(Error::invalid("FAR targets must lie in (0, 100]"));
        }
        if self.pretrain.backbone.resolution != self.dataset.resolution {
            return Err(Error::invalid(format!(
                "backbone resolution {} differs from dataset resolution {}",
                self.pretrain.backbone.resolution, self.dataset.resolution
            )));
        }
        Ok(())
    }

    fn echo(&self) -> Result<()> {
        create_dir(&self.out_dir)?;
        let path = self.out_dir.join("config.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }

    /// Metric columns in report order.
    pub fn metric_columns(&self) -> Vec<String> {
        let mut cols = vec![AUC.to_string(), EER.to_string(), RANK1.to_string()];
        cols.extend(self.far_targets.iter().map(|&f| vr_key(f)));
        cols
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.mean_loss.to_string()])
        .collect();
    write_csv(path, &["epoch".into(), "mean_loss".into()], &rows)
}

/// Left-aligned text table.
pub fn format_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    for r in rows {
        out.push('\n');
        out.push_str(&line(r));
    }
    out
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub dir: PathBuf,
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub source_shape: [usize; 3],
    pub target_shape: [usize; 3],
    pub n_folds: usize,
    pub train_ids_per_fold: usize,
    pub eval_ids_per_fold: usize,
}

impl fmt::Display for GenDataSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dataset {}: {} identities x {} samples per modality, source {:?}, target {:?}; {} folds of {} train / {} eval identities",
            self.dir.display(),
            self.n_identities,
            self.samples_per_identity,
            self.source_shape,
            self.target_shape,
            self.n_folds,
            self.train_ids_per_fold,
            self.eval_ids_per_fold
        )
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<GenDataSummary> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    guard(&dir.join("manifest.json"), force)?;
    let dataset = generate_dataset(&cfg.dataset)?;
    let protocol = make_protocol(&dataset.manifest, cfg.protocol.n_folds, cfg.protocol.train_fraction, cfg.seed)?;
    cfg.echo()?;
    dataset.save(&dir)?;
    write_json(&dir.join("protocol.json"), &protocol)?;
    Ok(GenDataSummary {
        dir,
        n_identities: dataset.manifest.config.n_identities,
        samples_per_identity: dataset.manifest.config.samples_per_identity,
        source_shape: dataset.manifest.shape(Modality::Source),
        target_shape: dataset.manifest.shape(Modality::Target),
        n_folds: protocol.n_folds,
        train_ids_per_fold: protocol.folds[0].train_ids.len(),
        eval_ids_per_fold: protocol.folds[0].eval_ids.len(),
    })
}

/// Loaded dataset, protocol and (optionally) the pretrained backbone.
pub struct Inputs {
    pub dataset: Dataset,
    pub protocol: Protocol,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.data_dir();
        let dataset = Dataset::load(&dir)?;
        let ppath = dir.join("protocol.json");
        if !ppath.exists() {
            return Err(Error::MissingInput {
                path: ppath,
                what: "protocol file (run gen-data)".into(),
            });
        }
        let protocol: Protocol = read_json(&ppath)?;
        Ok(Inputs { dataset, protocol })
    }

    /// Both modalities of every stored sample of the fold's training identities.
    pub fn training_set(&self, fold: &ProtocolSplit) -> Result<TrainingSet> {
        let spi = self.dataset.manifest.config.samples_per_identity;
        let refs = |modality| -> Vec<SampleRef> {
            fold.train_ids
                .iter()
                .flat_map(|&identity| (0..spi).map(move |index| SampleRef { identity, index, modality }))
                .collect()
        };
        let (src, tgt) = (refs(Modality::Source), refs(Modality::Target));
        Ok(TrainingSet {
            source_images: self.dataset.images(&src)?,
            source_ids: src.iter().map(|r| r.identity).collect(),
            target_images: self.dataset.images(&tgt)?,
            target_ids: tgt.iter().map(|r| r.identity).collect(),
        })
    }

    pub fn templates(&self, net: &HfrNetwork, refs: &[SampleRef], modality: Modality) -> Result<Templates> {
        let images = self.dataset.images(refs)?;
        Templates::new(refs.iter().map(|r| r.identity).collect(), net.embed(&images, modality)?)
    }
}

pub fn load_backbone(cfg: &ExperimentConfig) -> Result<FrozenBackbone> {
    let path = cfg.backbone_path();
    if !path.exists() {
        return Err(Error::MissingInput {
            path,
            what: "pretrained backbone (run pretrain)".into(),
        });
    }
    Checkpoint::load(&path)?.to_backbone(cfg.backbone_spec())
}

// ---------------------------------------------------------------- pretrain

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub images: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub parameters: usize,
}

impl fmt::Display for PretrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pretrained {} parameters on {} source images for {} epochs (final loss {:.6}); saved {}",
            self.parameters,
            self.images,
            self.epochs,
            self.final_loss,
            self.checkpoint.display()
        )
    }
}

/// Source-modality renderings of every identity beyond the stored samples.
pub fn pretraining_images(dataset: &Dataset, views: usize) -> Result<(Tensor, Vec<usize>)> {
    let m = &dataset.manifest;
    let renderer = Renderer::new(m);
    let first = m.config.samples_per_identity;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for id in 0..m.config.n_identities {
        for index in first..first + views {
            images.push(renderer.render(id, index, Modality::Source)?);
            labels.push(id);
        }
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok((Tensor::stack(&refs)?, labels))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, force: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let path = cfg.backbone_path();
    guard(&path, force)?;
    let dataset = Dataset::load(&cfg.data_dir())?;
    if cfg.pretrain_views == 0 {
        return Err(Error::invalid("pretrain_views must be positive"));
    }
    let (images, labels) = pretraining_images(&dataset, cfg.pretrain_views)?;
    let (backbone, history) = pretrain_backbone(&images, &labels, &cfg.pretrain)?;
    cfg.echo()?;
    Checkpoint::from_backbone(&backbone).save(&path)?;
    let history: Vec<EpochLoss> = history
        .iter()
        .enumerate()
        .map(|(i, &mean_loss)| EpochLoss { epoch: i + 1, mean_loss })
        .collect();
    write_loss_csv(&cfg.out_dir.join("pretrain_loss.csv"), &history)?;
    Ok(PretrainSummary {
        checkpoint: path,
        images: labels.len(),
        epochs: history.len(),
        final_loss: history.last().map_or(f64::NAN, |e| e.mean_loss),
        parameters: backbone.num_parameters(),
    })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub force: bool,
    /// Continue from `state.ckpt` where present.
    pub resume: bool,
    /// Subdirectory of the output directory receiving `fold<k>/`.
    pub subdir: String,
    /// Restrict to these folds (all when `None`).
    pub folds: Option<Vec<usize>>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            force: false,
            resume: false,
            subdir: "train".into(),
            folds: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldTraining {
    pub fold: usize,
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub plan: String,
    pub trainable_parameters: usize,
    pub folds: Vec<FoldTraining>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "plan {} ({} trainable parameters)", self.plan, self.trainable_parameters)?;
        for t in &self.folds {
            write!(
                f,
                "\nfold {}: {} epochs, loss {:.6} -> {:.6}, {}",
                t.fold,
                t.epochs,
                t.first_loss,
                t.final_loss,
                t.dir.display()
            )?;
        }
        Ok(())
    }
}

fn selected_folds<'a>(protocol: &'a Protocol, only: &Option<Vec<usize>>) -> Result<Vec<&'a ProtocolSplit>> {
    match only {
        None => Ok(protocol.folds.iter().collect()),
        Some(ids) => ids
            .iter()
            .map(|&k| {
                protocol
                    .folds
                    .get(k)
                    .ok_or_else(|| Error::invalid(format!("fold {k} not in protocol ({} folds)", protocol.folds.len())))
            })
            .collect(),
    }
}

/// Seed for the blocks of one fold.
fn block_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.plan.is_empty() {
        return Err(Error::Contract("nothing trainable: the insertion plan is empty".into()));
    }
    let inputs = Inputs::load(cfg)?;
    let backbone = load_backbone(cfg)?;
    let root = cfg.out_dir.join(&opts.subdir);
    let folds = selected_folds(&inputs.protocol, &opts.folds)?;
    cfg.echo()?;
    let mut summary = TrainSummary {
        plan: cfg.plan.label(),
        trainable_parameters: 0,
        folds: Vec::new(),
    };
    for split in folds {
        let dir = root.join(format!("fold{}", split.fold));
        let model_path = dir.join("model.ckpt");
        let state_path = dir.join("state.ckpt");
        let resuming = opts.resume && state_path.exists();
        if !resuming {
            guard(&model_path, opts.force)?;
        }
        create_dir(&dir)?;
        let (mut net, state) = if resuming {
            let net = Checkpoint::load(&model_path)?.to_network(cfg.backbone_spec(), Conditioning::Conditional)?;
            if net.plan() != &cfg.plan {
                return Err(Error::invalid(format!(
                    "cannot resume: checkpoint plan {} differs from configured plan {}",
                    net.plan().label(),
                    cfg.plan.label()
                )));
            }
            (net, Checkpoint::load(&state_path)?.to_train_state()?)
        } else {
            let net = HfrNetwork::with_conditioning(
                backbone.clone(),
                cfg.plan.clone(),
                block_seed(cfg.seed, split.fold),
                Conditioning::Conditional,
            )?;
            (net, TrainState::new(&cfg.train))
        };
        summary.trainable_parameters = net.num_trainable_parameters();
        let data = inputs.training_set(split)?;
        let save = |net: &HfrNetwork, state: &TrainState| -> Result<()> {
            Checkpoint::from_network(net).save(&model_path)?;
            Checkpoint::from_train_state(state).save(&state_path)?;
            write_loss_csv(&dir.join("loss.csv"), &state.history)
        };
        let state = train_from(&mut net, &data, &cfg.train, state, |n, s| save(n, s))?;
        save(&net, &state)?;
        summary.folds.push(FoldTraining {
            fold: split.fold,
            epochs: state.epochs_done,
            first_loss: state.history.first().map_or(f64::NAN, |e| e.mean_loss),
            final_loss: state.history.last().map_or(f64::NAN, |e| e.mean_loss),
            dir,
        });
    }
    Ok(summary)
}

// ---------------------------------------------------------------- eval

/// Which gallery/probe assignment to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Source gallery against target probes.
    CrossModality,
    /// Even-indexed source samples as gallery, odd-indexed source samples as probes.
    SourceSanity,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub force: bool,
    pub split: EvalSplit,
    /// Directory holding `fold<k>/model.ckpt`; `None` reports the baseline only.
    pub models: Option<PathBuf>,
    /// Embed probes with the gate closed.
    pub gate_closed: bool,
    pub folds: Option<Vec<usize>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            force: false,
            split: EvalSplit::CrossModality,
            models: None,
            gate_closed: false,
            folds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub folds: Vec<usize>,
    pub per_fold: Vec<MetricRecord>,
    pub summary: FoldReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub columns: Vec<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["method".to_string(), "fold".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut rows = Vec::new();
        for r in &self.rows {
            for (fold, rec) in r.folds.iter().zip(&r.per_fold) {
                let mut cells = vec![r.method.clone(), fold.to_string()];
                cells.extend(self.columns.iter().map(|c| format!("{:.4}", rec[c])));
                rows.push(cells);
            }
            let mut mean = vec![r.method.clone(), "mean".to_string()];
            mean.extend(self.columns.iter().map(|c| format!("{:.4}", r.summary.metrics[c].mean)));
            rows.push(mean);
            let mut std = vec![r.method.clone(), "std".to_string()];
            std.extend(self.columns.iter().map(|c| format!("{:.4}", r.summary.metrics[c].std)));
            rows.push(std);
        }
        (header, rows)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, r) = self.table();
        f.write_str(&format_table(&h, &r))
    }
}

fn split_refs(split: &ProtocolSplit, kind: EvalSplit) -> (Vec<SampleRef>, Vec<SampleRef>, Modality) {
    match kind {
        EvalSplit::CrossModality => (split.gallery.clone(), split.probes.clone(), Modality::Target),
        EvalSplit::SourceSanity => {
            let (g, p) = split.gallery.iter().partition(|r| r.index % 2 == 0);
            (g, p, Modality::Source)
        }
    }
}

/// Metrics of one network on one fold.
pub fn evaluate_fold(
    inputs: &Inputs,
    net: &HfrNetwork,
    split: &ProtocolSplit,
    kind: EvalSplit,
    gate_closed: bool,
    far_targets: &[f64],
) -> Result<MetricRecord> {
    let (g, p, probe_modality) = split_refs(split, kind);
    let probe_modality = if gate_closed { Modality::Source } else { probe_modality };
    let gallery = inputs.templates(net, &g, Modality::Source)?;
    let probes = inputs.templates(net, &p, probe_modality)?;
    evaluate(&gallery, &probes, far_targets)
}

pub fn cmd_eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let out = cfg.out_dir.join("eval");
    guard(&out.join("metrics.json"), opts.force)?;
    let inputs = Inputs::load(cfg)?;
    let backbone = load_backbone(cfg)?;
    let folds = selected_folds(&inputs.protocol, &opts.folds)?;
    let bare = HfrNetwork::with_conditioning(backbone, InsertionPlan::empty(), 0, Conditioning::Conditional)?;
    let fold_ids: Vec<usize> = folds.iter().map(|s| s.fold).collect();
    let mut rows = Vec::new();
    let baseline = folds
        .iter()
        .map(|s| evaluate_fold(&inputs, &bare, s, opts.split, false, &cfg.far_targets))
        .collect::<Result<Vec<_>>>()?;
    rows.push(EvalRow {
        method: "baseline".into(),
        folds: fold_ids.clone(),
        summary: aggregate_folds(&baseline)?,
        per_fold: baseline,
    });
    if let Some(models) = &opts.models {
        let per_fold = folds
            .iter()
            .map(|s| {
                let net = Checkpoint::load(&models.join(format!("fold{}", s.fold)).join("model.ckpt"))?
                    .to_network(cfg.backbone_spec(), Conditioning::Conditional)?;
                evaluate_fold(&inputs, &net, s, opts.split, opts.gate_closed, &cfg.far_targets)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(EvalRow {
            method: if opts.gate_closed { "caim_gate_closed".into() } else { "caim".into() },
            folds: fold_ids,
            summary: aggregate_folds(&per_fold)?,
            per_fold,
        });
    }
    let report = EvalReport {
        split: opts.split,
        columns: cfg.metric_columns(),
        rows,
    };
    cfg.echo()?;
    create_dir(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    let (h, r) = report.table();
    write_csv(&out.join("metrics.csv"), &h, &r)?;
    Ok(report)
}

// ---------------------------------------------------------------- ablate

/// One configuration of the ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub plan: InsertionPlan,
    pub conditioning: Conditioning,
}

/// Plans {1}, {1,2}, ..., {1..n} followed by the two unconditional variants
/// on `plan`.
pub fn ablation_variants(n_stages: usize, plan: &InsertionPlan) -> Vec<AblationVariant> {
    let mut v: Vec<AblationVariant> = (1..=n_stages)
        .map(|k| {
            let p = InsertionPlan::prefix(k);
            AblationVariant {
                label: p.label(),
                plan: p,
                conditioning: Conditioning::Conditional,
            }
        })
        .collect();
    for (name, variant) in [("AIM", UnconditionalVariant::Aim), ("IN", UnconditionalVariant::InstanceNorm)] {
        v.push(AblationVariant {
            label: format!("{name} {}", plan.label()),
            plan: plan.clone(),
            conditioning: Conditioning::Unconditional(variant),
        });
    }
    v
}

#[derive(Debug, Clone, Default)]
pub struct AblateOptions {
    pub force: bool,
    pub folds: Option<Vec<usize>>,
    /// Restrict to variants with these labels.
    pub only: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub trainable_parameters: usize,
    pub summary: FoldReport,
    /// Source-modality embeddings equal the bare backbone's bit for bit.
    pub source_identity_preserved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub folds: Vec<usize>,
    pub columns: Vec<String>,
    pub baseline: FoldReport,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["layers".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("source_identity".into());
        let fmt_row = |label: &str, report: &FoldReport, flag: &str| {
            let mut cells = vec![label.to_string()];
            cells.extend(self.columns.iter().map(|c| format!("{:.4}", report.metrics[c].mean)));
            cells.push(flag.to_string());
            cells
        };
        let mut rows = vec![fmt_row("baseline", &self.baseline, "preserved")];
        for r in &self.rows {
            let flag = if r.source_identity_preserved { "preserved" } else { "VIOLATED" };
            rows.push(fmt_row(&r.variant.label, &r.summary, flag));
        }
        (header, rows)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, r) = self.table();
        f.write_str(&format_table(&h, &r))
    }
}

/// True when `net` maps source-modality images exactly like its bare backbone.
pub fn source_path_identity(net: &HfrNetwork, images: &Tensor) -> Result<bool> {
    let bare = HfrNetwork::with_conditioning(
        net.backbone().clone(),
        InsertionPlan::empty(),
        0,
        Conditioning::Conditional,
    )?;
    Ok(net.embed(images, Modality::Source)?.bit_eq(&bare.embed(images, Modality::Source)?))
}

/// Trains and scores one variant on the given folds.
pub fn run_variant(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    backbone: &FrozenBackbone,
    variant: &AblationVariant,
    folds: &[&ProtocolSplit],
) -> Result<AblationRow> {
    let mut per_fold = Vec::new();
    let mut preserved = true;
    let mut trainable = 0;
    for split in folds {
        let mut net = HfrNetwork::with_conditioning(
            backbone.clone(),
            variant.plan.clone(),
            block_seed(cfg.seed, split.fold),
            variant.conditioning,
        )?;
        trainable = net.num_trainable_parameters();
        if trainable > 0 {
            let data = inputs.training_set(split)?;
            train_from(&mut net, &data, &cfg.train, TrainState::new(&cfg.train), |_, _| Ok(()))?;
        }
        per_fold.push(evaluate_fold(inputs, &net, split, EvalSplit::CrossModality, false, &cfg.far_targets)?);
        let gallery = inputs.dataset.images(&split.gallery)?;
        preserved &= source_path_identity(&net, &gallery)?;
    }
    Ok(AblationRow {
        variant: variant.clone(),
        trainable_parameters: trainable,
        summary: aggregate_folds(&per_fold)?,
        source_identity_preserved: preserved,
    })
}

pub fn cmd_ablate(cfg: &ExperimentConfig, opts: &AblateOptions) -> Result<AblationTable> {
    cfg.validate()?;
    let out = cfg.out_dir.join("ablate");
    guard(&out.join("table.json"), opts.force)?;
    let inputs = Inputs::load(cfg)?;
    let backbone = load_backbone(cfg)?;
    let folds = selected_folds(&inputs.protocol, &opts.folds)?;
    let mut variants = ablation_variants(backbone.spec().num_stages(), &cfg.plan);
    if let Some(only) = &opts.only {
        if let Some(missing) = only.iter().find(|l| !variants.iter().any(|v| &v.label == *l)) {
            return Err(Error::invalid(format!("unknown ablation variant {missing:?}")));
        }
        variants.retain(|v| only.contains(&v.label));
    }
    let bare = HfrNetwork::with_conditioning(backbone.clone(), InsertionPlan::empty(), 0, Conditioning::Conditional)?;
    let baseline = folds
        .iter()
        .map(|s| evaluate_fold(&inputs, &bare, s, EvalSplit::CrossModality, false, &cfg.far_targets))
        .collect::<Result<Vec<_>>>()?;
    let rows = variants
        .iter()
        .map(|v| run_variant(cfg, &inputs, &backbone, v, &folds))
        .collect::<Result<Vec<_>>>()?;
    let table = AblationTable {
        folds: folds.iter().map(|s| s.fold).collect(),
        columns: cfg.metric_columns(),
        baseline: aggregate_folds(&baseline)?,
        rows,
    };
    cfg.echo()?;
    create_dir(&out)?;
    write_json(&out.join("table.json"), &table)?;
    let (h, r) = table.table();
    write_csv(&out.join("table.csv"), &h, &r)?;
    Ok(table)
}

// ---------------------------------------------------------------- cost

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub cost: NetworkCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["model", "mflops", "kparams", "flops_overhead_%", "params_overhead_%"]
            .map(String::from)
            .to_vec();
        let rows = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    format!("{:.4}", r.cost.total_flops as f64 / 1e6),
                    format!("{:.3}", r.cost.total_params as f64 / 1e3),
                    format!("{:.3}", r.cost.flops_overhead_percent),
                    format!("{:.3}", r.cost.params_overhead_percent),
                ]
            })
            .collect();
        (header, rows)
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, r) = self.table();
        f.write_str(&format_table(&h, &r))
    }
}

/// Cost of the bare backbone and of every prefix plan; no inputs needed.
pub fn cost_table(spec: &BackboneSpec) -> Result<CostTable> {
    let mut bb = FrozenBackbone::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    bb.freeze();
    let mut rows = Vec::new();
    for k in 0..=spec.num_stages() {
        let plan = InsertionPlan::prefix(k);
        let label = if k == 0 {
            "backbone".to_string()
        } else {
            format!("backbone + CAIM({})", plan.label())
        };
        let net = HfrNetwork::with_conditioning(bb.clone(), plan, 0, Conditioning::Conditional)?;
        rows.push(CostRow { label, cost: net.cost() });
    }
    Ok(CostTable { rows })
}

pub fn cmd_cost(cfg: &ExperimentConfig, force: bool) -> Result<CostTable> {
    let out = cfg.out_dir.join("cost");
    guard(&out.join("cost.json"), force)?;
    let table = cost_table(cfg.backbone_spec())?;
    cfg.echo()?;
    create_dir(&out)?;
    write_json(&out.join("cost.json"), &table)?;
    let (h, r) = table.table();
    write_csv(&out.join("cost.csv"), &h, &r)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
        let partial = ExperimentConfig::from_json(r#"{"seed": 7, "plan": [1]}"#).unwrap().resolved();
        assert_eq!(partial.train.seed, 7);
        assert_eq!(partial.plan.positions(), &[1]);
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            seed: Some(9),
            out_dir: Some("x".into()),
        };
        let cfg = ExperimentConfig::load(None, &o).unwrap();
        assert_eq!((cfg.seed, cfg.dataset.seed, cfg.out_dir.as_path()), (9, 9, Path::new("x")));
    }

    #[test]
    fn ablation_has_seven_rows() {
        let v = ablation_variants(5, &InsertionPlan::prefix(3));
        let labels: Vec<&str> = v.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["1", "1-2", "1-3", "1-4", "1-5", "AIM 1-3", "IN 1-3"]);
    }

    #[test]
    fn cost_rows_ordered_and_empty_plan_free() {
        let t = cost_table(&BackboneSpec::default()).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.rows[0].cost.flops_overhead_percent, 0.0);
        assert_eq!(t.rows[0].cost.params_overhead_percent, 0.0);
        assert!(t.rows.windows(2).all(|w| w[0].cost.total_flops < w[1].cost.total_flops));
    }

    #[test]
    fn table_alignment() {
        let t = format_table(
            &["a".into(), "bb".into()],
            &[vec!["ccc".into(), "d".into()]],
        );
        assert_eq!(t, "a    bb\nccc  d");
    }
}
