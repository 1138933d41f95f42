//! Verification and identification metrics on hand-made scores.

use caim::metrics::{auc, eer_point, rank1, roc, verification_scores, vr_at_far, ScoreSet, Templates};
use caim::Tensor;

fn main() -> caim::Result<()> {
    let scores = ScoreSet::new(
        vec![0.91, 0.85, 0.80, 0.77, 0.60, 0.42],
        vec![0.70, 0.55, 0.50, 0.33, 0.30, 0.21, 0.12, 0.05, -0.1, -0.3],
    )?;
    let curve = roc(&scores)?;
    let (eer, threshold) = eer_point(&scores)?;
    println!("AUC {:.2}%  EER {eer:.2}% at threshold {threshold}", auc(&curve));
    for p in vr_at_far(&scores, &[1.0, 10.0, 20.0])? {
        println!(
            "VR@FAR={}%: {:.1}% (realised FAR {:.1}%, resolvable {})",
            p.target_far, p.tar, p.realized_far, p.resolvable
        );
    }

    let gallery = Templates::new(vec![0, 1, 2], Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0])?)?;
    let probes = Templates::new(
        vec![0, 1, 2, 1],
        Tensor::new([4, 2], vec![0.9, 0.1, 0.2, 0.8, -0.7, 0.6, 0.9, 0.3])?,
    )?;
    println!("Rank-1 {:.1}%", rank1(&gallery, &probes)?);
    let s = verification_scores(&gallery, &probes)?;
    println!("{} genuine / {} impostor comparisons", s.genuine.len(), s.impostor.len());
    Ok(())
}
