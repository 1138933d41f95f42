//! Biometric verification and identification metrics.
//!
//! Scores are similarities: higher means "more likely the same identity".
//! Every threshold metric depends only on the order of the scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Genuine and impostor similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.is_empty() || impostor.is_empty() {
            return Err(Error::invalid(format!(
                "score set needs genuine and impostor scores (got {} / {})",
                genuine.len(),
                impostor.len()
            )));
        }
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::invalid("score set contains non-finite values"));
        }
        Ok(ScoreSet { genuine, impostor })
    }

    /// Swaps the roles of genuine and impostor scores.
    pub fn swapped(&self) -> ScoreSet {
        ScoreSet {
            genuine: self.impostor.clone(),
            impostor: self.genuine.clone(),
        }
    }
}

/// One operating point. Rates are fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
    /// Impostor / genuine scores at or above the threshold.
    pub false_accepts: usize,
    pub true_accepts: usize,
}

/// ROC curve sorted by increasing threshold, so FAR and TAR are non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Number of entries of the ascending slice that are `>= t`.
fn count_at_or_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

/// Sweeps every observed score plus ±∞ as a threshold; accept iff `score >= t`.
pub fn roc(scores: &ScoreSet) -> Result<RocCurve> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::invalid("roc needs non-empty genuine and impostor scores"));
    }
    let gen = sorted(&scores.genuine);
    let imp = sorted(&scores.impostor);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();
    let mut all = Vec::with_capacity(thresholds.len() + 2);
    all.push(f64::NEG_INFINITY);
    all.extend(thresholds);
    all.push(f64::INFINITY);
    let (ng, ni) = (gen.len(), imp.len());
    let points = all
        .into_iter()
        .map(|t| {
            let fa = count_at_or_above(&imp, t);
            let ta = count_at_or_above(&gen, t);
            RocPoint {
                threshold: t,
                far: fa as f64 / ni as f64,
                tar: ta as f64 / ng as f64,
                false_accepts: fa,
                true_accepts: ta,
            }
        })
        .collect();
    Ok(RocCurve {
        points,
        n_genuine: ng,
        n_impostor: ni,
    })
}

/// Trapezoidal area under TAR-vs-FAR, as a percentage.
///
/// Accumulated in integer half-units so ties contribute exactly one half.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut twice_area: u128 = 0;
    for pair in curve.points.windows(2) {
        let (hi, lo) = (&pair[0], &pair[1]);
        let dx = (hi.false_accepts - lo.false_accepts) as u128;
        twice_area += dx * (hi.true_accepts + lo.true_accepts) as u128;
    }
    let denom = 2 * curve.n_genuine as u128 * curve.n_impostor as u128;
    100.0 * twice_area as f64 / denom as f64
}

/// Equal error rate as a percentage.
///
/// Picks the swept threshold minimising |FAR − FRR| (lowest threshold on
/// ties) and returns the midpoint (FAR + FRR) / 2 there.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    Ok(eer_point(scores)?.0)
}

/// EER together with the threshold where it was taken.
pub fn eer_point(scores: &ScoreSet) -> Result<(f64, f64)> {
    let curve = roc(scores)?;
    let mut best: Option<(f64, f64, f64)> = None;
    for p in &curve.points {
        let frr = 1.0 - p.tar;
        let gap = (p.far - frr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, 50.0 * (p.far + frr), p.threshold));
        }
    }
    let (_, e, t) = best.expect("curve has sentinel points");
    Ok((e, t))
}

/// Verification rate at one requested false accept rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationPoint {
    /// Requested FAR, percent.
    pub target_far: f64,
    /// Realised FAR at the chosen threshold, percent.
    pub realized_far: f64,
    /// TAR at the chosen threshold, percent.
    pub tar: f64,
    pub threshold: f64,
    /// False when the impostor set is too small to resolve the target.
    pub resolvable: bool,
}

/// TAR at the smallest swept threshold whose FAR does not exceed each target.
pub fn vr_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<VerificationPoint>> {
    if scores.impostor.is_empty() {
        return Err(Error::invalid("vr_at_far needs impostor scores"));
    }
    let curve = roc(scores)?;
    far_targets
        .iter()
        .map(|&target| {
            if !(0.0..=100.0).contains(&target) {
                return Err(Error::invalid(format!("FAR target {target}% outside [0, 100]")));
            }
            let frac = target / 100.0;
            let p = curve
                .points
                .iter()
                .find(|p| p.far <= frac)
                .expect("the +inf sentinel has FAR 0");
            Ok(VerificationPoint {
                target_far: target,
                realized_far: 100.0 * p.far,
                tar: 100.0 * p.tar,
                threshold: p.threshold,
                resolvable: frac * curve.n_impostor as f64 >= 1.0 || target == 0.0,
            })
        })
        .collect()
}

/// Identity-labelled embeddings (rows of an N×D tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub ids: Vec<usize>,
    pub embeddings: Tensor,
}

impl Templates {
    pub fn new(ids: Vec<usize>, embeddings: Tensor) -> Result<Self> {
        match embeddings.shape() {
            [n, _] if *n == ids.len() => Ok(Templates { ids, embeddings }),
            s => Err(Error::shape(
                "templates",
                format!("{} ids for embeddings of shape {s:?}", ids.len()),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// probes × gallery cosine similarity matrix, row-major.
pub fn similarity_matrix(gallery: &Templates, probes: &Templates) -> Result<Vec<f64>> {
    if gallery.dim() != probes.dim() {
        return Err(Error::shape(
            "similarity_matrix",
            format!("gallery dim {} vs probe dim {}", gallery.dim(), probes.dim()),
        ));
    }
    let mut out = Vec::with_capacity(gallery.len() * probes.len());
    for p in 0..probes.len() {
        for g in 0..gallery.len() {
            out.push(cosine_similarity(probes.row(p), gallery.row(g)));
        }
    }
    Ok(out)
}

/// Closed-set Rank-1 identification rate, percent.
///
/// A probe is correct when its most similar gallery template carries its
/// identity; equal similarities resolve to the lowest gallery index.
pub fn rank1(gallery: &Templates, probes: &Templates) -> Result<f64> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("rank1 needs non-empty gallery and probes"));
    }
    if let Some(missing) = probes.ids.iter().find(|id| !gallery.ids.contains(id)) {
        return Err(Error::invalid(format!(
            "probe identity {missing} has no gallery template (closed-set protocol)"
        )));
    }
    let sims = similarity_matrix(gallery, probes)?;
    let g = gallery.len();
    let correct = probes
        .ids
        .iter()
        .enumerate()
        .filter(|(p, id)| {
            let row = &sims[p * g..(p + 1) * g];
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            gallery.ids[best] == **id
        })
        .count();
    Ok(100.0 * correct as f64 / probes.len() as f64)
}

/// All probe/gallery comparisons split into genuine and impostor scores.
pub fn verification_scores(gallery: &Templates, probes: &Templates) -> Result<ScoreSet> {
    let sims = similarity_matrix(gallery, probes)?;
    let g = gallery.len();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (p, pid) in probes.ids.iter().enumerate() {
        for (j, gid) in gallery.ids.iter().enumerate() {
            let s = sims[p * g + j];
            if gid == pid {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    ScoreSet::new(genuine, impostor)
}

/// Named metric values for one fold.
pub type MetricRecord = BTreeMap<String, f64>;

pub const AUC: &str = "auc";
pub const EER: &str = "eer";
pub const RANK1: &str = "rank1";

pub fn vr_key(far: f64) -> String {
    format!("vr@far={far}%")
}

/// AUC, EER, Rank-1 and VR@FAR for one gallery/probe split.
pub fn evaluate(gallery: &Templates, probes: &Templates, far_targets: &[f64]) -> Result<MetricRecord> {
    let scores = verification_scores(gallery, probes)?;
    let mut rec = MetricRecord::new();
    rec.insert(AUC.into(), auc(&roc(&scores)?));
    rec.insert(EER.into(), eer(&scores)?);
    rec.insert(RANK1.into(), rank1(gallery, probes)?);
    for p in vr_at_far(&scores, far_targets)? {
        rec.insert(vr_key(p.target_far), p.tar);
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single fold.
    pub std: f64,
}

/// Per-metric mean and spread over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl FoldReport {
    pub fn mean(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).map(|m| m.mean)
    }
}

pub fn aggregate_folds(per_fold: &[MetricRecord]) -> Result<FoldReport> {
    let first = per_fold
        .first()
        .ok_or_else(|| Error::invalid("aggregate_folds needs at least one fold"))?;
    for (i, rec) in per_fold.iter().enumerate() {
        if !rec.keys().eq(first.keys()) {
            return Err(Error::invalid(format!(
                "fold {i} has metric keys {:?}, fold 0 has {:?}",
                rec.keys().collect::<Vec<_>>(),
                first.keys().collect::<Vec<_>>()
            )));
        }
    }
    let n = per_fold.len() as f64;
    let metrics = first
        .keys()
        .map(|key| {
            let values: Vec<f64> = per_fold.iter().map(|r| r[key]).collect();
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            (key.clone(), MetricSummary { values, mean, std })
        })
        .collect();
    Ok(FoldReport { metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet::new(g.to_vec(), i.to_vec()).unwrap()
    }

    #[test]
    fn separable_scores() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let curve = roc(&s).unwrap();
        assert!(curve.points.iter().any(|p| p.far == 0.0 && p.tar == 1.0));
        assert_eq!(auc(&curve), 100.0);
        assert_eq!(eer(&s).unwrap(), 0.0);
        let vr = vr_at_far(&s, &[1.0]).unwrap();
        assert_eq!(vr[0].tar, 100.0);
    }

    #[test]
    fn hand_case_auc_and_eer() {
        let s = set(&[0.9, 0.4], &[0.6, 0.1]);
        // genuine > impostor pairs: (0.9,0.6) (0.9,0.1) (0.4,0.1) = 3 of 4
        assert_eq!(auc(&roc(&s).unwrap()), 75.0);
        assert_eq!(eer(&s).unwrap(), 50.0);
    }

    #[test]
    fn roc_is_monotone_with_sentinels() {
        let s = set(&[0.3, 0.5, 0.5, 0.9], &[0.1, 0.5, 0.7]);
        let c = roc(&s).unwrap();
        assert_eq!(c.points.first().unwrap().far, 1.0);
        assert_eq!(c.points.last().unwrap().tar, 0.0);
        for w in c.points.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[0].far >= w[1].far && w[0].tar >= w[1].tar);
        }
    }

    #[test]
    fn chance_scores_are_half() {
        let s = set(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
        assert_eq!(auc(&roc(&s).unwrap()), 50.0);
        let c = roc(&s).unwrap();
        assert!(c.points.iter().all(|p| p.far == p.tar));
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
        let s = ScoreSet {
            genuine: vec![1.0],
            impostor: vec![],
        };
        assert!(roc(&s).is_err());
        assert!(vr_at_far(&s, &[1.0]).is_err());
    }

    fn templates(ids: &[usize], rows: &[&[f64]]) -> Templates {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Templates::new(ids.to_vec(), Tensor::new([ids.len(), d], data).unwrap()).unwrap()
    }

    #[test]
    fn rank1_self_match_and_one_hot() {
        let g = templates(&[0, 1, 2], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(rank1(&g, &g).unwrap(), 100.0);
    }

    #[test]
    fn rank1_one_misordered_probe() {
        let g = templates(&[0, 1, 2], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let p = templates(&[0, 1, 2], &[&[0.9, 0.1, 0.0], &[0.0, 1.0, 0.2], &[0.0, 0.8, 0.3]]);
        let r = rank1(&g, &p).unwrap();
        assert!((r - 66.67).abs() < 0.01, "{r}");
    }

    #[test]
    fn rank1_ties_go_to_lowest_index() {
        let g = templates(&[7, 3], &[&[1.0, 0.0], &[1.0, 0.0]]);
        let p = templates(&[7], &[&[1.0, 0.0]]);
        assert_eq!(rank1(&g, &p).unwrap(), 100.0);
        let g2 = templates(&[3, 7], &[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(rank1(&g2, &p).unwrap(), 0.0);
    }

    #[test]
    fn rank1_rejects_open_set_probe() {
        let g = templates(&[0], &[&[1.0, 0.0]]);
        let p = templates(&[5], &[&[1.0, 0.0]]);
        assert!(rank1(&g, &p).is_err());
    }

    #[test]
    fn fold_aggregation() {
        let rec = |v: f64| MetricRecord::from([("rank1".to_string(), v)]);
        let r = aggregate_folds(&[rec(80.0), rec(90.0)]).unwrap();
        assert_eq!(r.mean("rank1"), Some(85.0));
        assert!((r.metrics["rank1"].std - 7.0711).abs() < 1e-4);
        let single = aggregate_folds(&[rec(42.0)]).unwrap();
        assert_eq!(single.metrics["rank1"].std, 0.0);
        let same = aggregate_folds(&[rec(3.0), rec(3.0), rec(3.0)]).unwrap();
        assert_eq!(same.metrics["rank1"].std, 0.0);
        let mut other = rec(1.0);
        other.insert("eer".into(), 2.0);
        assert!(aggregate_folds(&[rec(1.0), other]).is_err());
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn row_shape_formatting() {
        // A Rank-1 / VR@1% / VR@0.1% triple renders as a two-decimal row.
        let row = format!("{:.2} & {:.2} & {:.2}", 73.07, 76.81, 46.94);
        assert_eq!(row, "73.07 & 76.81 & 46.94");
    }
}
