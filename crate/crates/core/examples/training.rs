//! End to end on a small synthetic benchmark: pretrain a backbone on the
//! source modality, insert CAIM blocks, train them on cross-modality pairs
//! and compare cross-modality metrics before and after.
//!
//! Run with `cargo run --release --example training`.

use caim::experiment::pretraining_images;
use caim::metrics::{evaluate, Templates};
use caim::network::{
    insert_caim, pretrain_backbone, BackboneSpec, HfrNetwork, InsertionPlan, Modality, PretrainConfig,
};
use caim::synth::{generate_dataset, make_protocol, Dataset, DatasetConfig, SampleRef};
use caim::trainer::{train, TrainConfig, TrainingSet};

fn templates(data: &Dataset, net: &HfrNetwork, refs: &[SampleRef], m: Modality) -> caim::Result<Templates> {
    Templates::new(refs.iter().map(|r| r.identity).collect(), net.embed(&data.images(refs)?, m)?)
}

fn main() -> caim::Result<()> {
    let data = generate_dataset(&DatasetConfig {
        n_identities: 30,
        ..DatasetConfig::default()
    })?;
    let spec = BackboneSpec {
        stage_channels: vec![8, 16, 32, 32, 32],
        embedding_dim: 32,
        ..BackboneSpec::default()
    };
    let (images, labels) = pretraining_images(&data, 6)?;
    let pre = PretrainConfig {
        backbone: spec,
        epochs: 15,
        ..PretrainConfig::default()
    };
    let (backbone, history) = pretrain_backbone(&images, &labels, &pre)?;
    println!("pretraining loss {:.3} -> {:.3}", history[0], history[history.len() - 1]);

    let protocol = make_protocol(&data.manifest, 3, 0.4, 0)?;
    let fold = &protocol.folds[0];
    let spi = data.manifest.config.samples_per_identity;
    let refs = |modality| -> Vec<SampleRef> {
        fold.train_ids
            .iter()
            .flat_map(|&identity| (0..spi).map(move |index| SampleRef { identity, index, modality }))
            .collect()
    };
    let (src, tgt) = (refs(Modality::Source), refs(Modality::Target));
    let set = TrainingSet {
        source_images: data.images(&src)?,
        source_ids: src.iter().map(|r| r.identity).collect(),
        target_images: data.images(&tgt)?,
        target_ids: tgt.iter().map(|r| r.identity).collect(),
    };

    let mut net = insert_caim(backbone, InsertionPlan::prefix(3), 0)?;
    let score = |net: &HfrNetwork| -> caim::Result<_> {
        let g = templates(&data, net, &fold.gallery, Modality::Source)?;
        let p = templates(&data, net, &fold.probes, Modality::Target)?;
        evaluate(&g, &p, &[1.0])
    };
    println!("before: {:?}", score(&net)?);
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 3e-4,
        ..TrainConfig::default()
    };
    let state = train(&mut net, &set, &cfg)?;
    for e in state.history.iter().step_by(5) {
        println!("epoch {:>3}  loss {:.4}", e.epoch, e.mean_loss);
    }
    println!("after:  {:?}", score(&net)?);
    Ok(())
}
