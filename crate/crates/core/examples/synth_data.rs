//! Generates a small two-modality dataset and a fold protocol.

use caim::network::Modality;
use caim::synth::{generate_dataset, make_protocol, DatasetConfig, SampleRef};

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn main() -> caim::Result<()> {
    for gap in [0.0, 0.4, 0.8] {
        let cfg = DatasetConfig {
            n_identities: 10,
            samples_per_identity: 2,
            gap_strength: gap,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg)?;
        let m = &data.manifest;
        let src = data.get(&SampleRef { identity: 0, index: 0, modality: Modality::Source }).unwrap();
        let tgt = data.get(&SampleRef { identity: 0, index: 0, modality: Modality::Target }).unwrap();
        println!(
            "gap {gap}: {} samples, source {:?}, target {:?}, target transform {:?}",
            data.samples.len(),
            m.shape(Modality::Source),
            m.shape(Modality::Target),
            m.target_transform
        );
        println!("  mean |pixel| source {:.3}, target {:.3}", mean_abs(src.image.data()), mean_abs(tgt.image.data()));
        if gap == 0.8 {
            let p = make_protocol(m, 5, 0.5, 0)?;
            for f in &p.folds {
                println!(
                    "  fold {}: train {:?}, eval {:?}, {} gallery / {} probes",
                    f.fold,
                    f.train_ids,
                    f.eval_ids,
                    f.gallery.len(),
                    f.probes.len()
                );
            }
        }
    }
    Ok(())
}
