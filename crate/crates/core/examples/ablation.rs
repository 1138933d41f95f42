//! Insertion-plan sweep on a reduced benchmark through the experiment
//! drivers, written to a temporary directory.

use caim::experiment::{cmd_ablate, cmd_gen_data, cmd_pretrain, AblateOptions, ExperimentConfig};

fn main() -> caim::Result<()> {
    let dir = std::env::temp_dir().join("caim-ablation-example");
    let mut cfg = ExperimentConfig {
        out_dir: dir.clone(),
        ..ExperimentConfig::default()
    }
    .resolved();
    cfg.dataset.n_identities = 24;
    cfg.protocol.n_folds = 2;
    cfg.pretrain_views = 4;
    cfg.pretrain.epochs = 10;
    cfg.pretrain.backbone.stage_channels = vec![8, 16, 16, 16, 16];
    cfg.pretrain.backbone.embedding_dim = 16;
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 5e-4;

    println!("{}", cmd_gen_data(&cfg, true)?);
    println!("{}", cmd_pretrain(&cfg, true)?);
    let table = cmd_ablate(
        &cfg,
        &AblateOptions {
            force: true,
            folds: Some(vec![0]),
            only: None,
        },
    )?;
    println!("{table}");
    println!("outputs under {}", dir.display());
    Ok(())
}

