#![allow(dead_code)]

use caim::caim::{CaimBlock, Gate};
use caim::network::{insert_caim, BackboneSpec, FrozenBackbone, InsertionPlan, Modality};
use caim::style_norm::{self, InstanceNormParams, DEFAULT_EPSILON};
use caim::tape::{Tape, Var};
use caim::tensor::Tensor;
use caim::trainer::{contrastive_loss, Distance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

/// Builds the graph for a set of input tensors; returns their leaf handles
/// and the outputs to be reduced into a scalar.
pub type Build<'a> = dyn Fn(&mut Tape, &[Tensor]) -> caim::Result<(Vec<Var>, Vec<Var>)> + 'a;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// Entries bounded away from zero, so kinks sit outside the FD stencil.
pub fn off_zero_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

pub fn positive_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// `Σ_k Σ_i w_ki · out_ki` for fixed random weights.
fn reduce(tape: &mut Tape, outs: &[Var], weights: &[Vec<f64>]) -> caim::Result<Var> {
    let mut total: Option<Var> = None;
    for (&o, w) in outs.iter().zip(weights) {
        let weighted = tape.mul_const(o, w.clone())?;
        let s = tape.sum(weighted);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.expect("at least one output"))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, 1e-3)` over the compared entries.
    pub worst: f64,
    pub compared: usize,
    /// Entries whose stencil `x ± h` changes a ReLU activation pattern; the
    /// function is not differentiable across such a stencil.
    pub straddled: usize,
}

impl GradCheck {
    fn merge(self, o: GradCheck) -> GradCheck {
        GradCheck {
            worst: self.worst.max(o.worst),
            compared: self.compared + o.compared,
            straddled: self.straddled + o.straddled,
        }
    }
}

/// Compares reverse-mode gradients with central differences.
pub fn check_gradients(build: &Build, inputs: &[Tensor], rng: &mut impl Rng) -> GradCheck {
    let mut probe = Tape::new();
    let (_, outs) = build(&mut probe, inputs).unwrap();
    let weights: Vec<Vec<f64>> = outs
        .iter()
        .map(|&o| (0..probe.value(o).len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let loss_of = |ts: &[Tensor]| -> (f64, Vec<bool>) {
        let mut tape = Tape::new();
        let (_, outs) = build(&mut tape, ts).unwrap();
        let l = reduce(&mut tape, &outs, &weights).unwrap();
        (tape.value(l)[0], tape.relu_pattern())
    };

    let mut tape = Tape::new();
    let (leaves, outs) = build(&mut tape, inputs).unwrap();
    let loss = reduce(&mut tape, &outs, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (k, &leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let (up, up_pattern) = loss_of(&work);
            work[k].data_mut()[i] = x0 - FD_STEP;
            let (down, down_pattern) = loss_of(&work);
            work[k].data_mut()[i] = x0;
            if up_pattern != down_pattern {
                report.straddled += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            report.worst = report.worst.max(err);
            report.compared += 1;
        }
    }
    report
}

fn leaves(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.leaf(t)).collect()
}

pub struct GradCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: Box<Build<'static>>,
}

fn case(
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> caim::Result<Vec<Var>> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(move |tape, ts| {
            let vs = leaves(tape, ts);
            let outs = build(tape, &vs)?;
            Ok((vs, outs))
        }),
    }
}

fn tiny_network_case() -> GradCase {
    GradCase {
        name: "contrastive loss through a 1-block network",
        inputs: |rng| {
            let block = CaimBlock::new(4, rng);
            block.parameters().into_iter().cloned().collect()
        },
        build: Box::new(|tape, ts| {
            let spec = BackboneSpec {
                in_channels: 3,
                resolution: 8,
                stage_channels: vec![4, 4],
                embedding_dim: 5,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut backbone = FrozenBackbone::new(spec, &mut rng)?;
            backbone.freeze();
            let mut net = insert_caim(backbone, InsertionPlan::new([1])?, 0)?;
            net.set_blocks(vec![CaimBlock::from_parts(4, ts.to_vec())?])?;
            let source = random_tensor(&[4, 3, 8, 8], &mut rng);
            let target = random_tensor(&[4, 3, 8, 8], &mut rng);
            let bound = net.bind(tape);
            let s = tape.constant(source);
            let t = tape.constant(target);
            let e_s = net.embed_on_tape(tape, &bound, s, Modality::Source)?;
            let e_t = net.embed_on_tape(tape, &bound, t, Modality::Target)?;
            let loss = contrastive_loss(tape, e_s, e_t, &[0, 1, 0, 1], 2.0, Distance::Euclidean)?;
            Ok((bound.blocks[0].vars().to_vec(), vec![loss]))
        }),
    }
}

/// Every primitive, every normalisation operation, the full block and the
/// end-to-end loss.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        case(
            "conv2d stride 1 pad 1",
            |r| vec![random_tensor(&[2, 3, 5, 4], r), random_tensor(&[2, 3, 3, 3], r), random_tensor(&[2], r)],
            |t, v| Ok(vec![t.conv2d(v[0], v[1], v[2], 1, 1)?]),
        ),
        case(
            "conv2d stride 2 pad 1",
            |r| vec![random_tensor(&[2, 2, 7, 6], r), random_tensor(&[3, 2, 3, 3], r), random_tensor(&[3], r)],
            |t, v| Ok(vec![t.conv2d(v[0], v[1], v[2], 2, 1)?]),
        ),
        case(
            "dense",
            |r| vec![random_tensor(&[3, 5], r), random_tensor(&[4, 5], r), random_tensor(&[4], r)],
            |t, v| Ok(vec![t.dense(v[0], v[1], v[2])?]),
        ),
        case("relu", |r| vec![off_zero_tensor(&[3, 7], r)], |t, v| Ok(vec![t.relu(v[0])])),
        case(
            "global_average_pool",
            |r| vec![random_tensor(&[2, 3, 4, 5], r)],
            |t, v| Ok(vec![t.global_average_pool(v[0])?]),
        ),
        case(
            "add",
            |r| vec![random_tensor(&[2, 3], r), random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.add(v[0], v[1])?]),
        ),
        case(
            "sub",
            |r| vec![random_tensor(&[2, 3], r), random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.sub(v[0], v[1])?]),
        ),
        case(
            "mul",
            |r| vec![random_tensor(&[2, 3], r), random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.mul(v[0], v[1])?]),
        ),
        case(
            "mul with a shared operand",
            |r| vec![random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.mul(v[0], v[0])?]),
        ),
        case("scale", |r| vec![random_tensor(&[4], r)], |t, v| Ok(vec![t.scale(v[0], -1.7)])),
        case("add_scalar", |r| vec![random_tensor(&[4], r)], |t, v| Ok(vec![t.add_scalar(v[0], 0.3)])),
        case("square", |r| vec![random_tensor(&[2, 4], r)], |t, v| Ok(vec![t.square(v[0])])),
        case("sqrt", |r| vec![positive_tensor(&[2, 4], r)], |t, v| Ok(vec![t.sqrt(v[0])])),
        case(
            "mul_const",
            |r| vec![random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25])?]),
        ),
        case(
            "add_channel",
            |r| vec![random_tensor(&[2, 3, 2, 2], r), random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.add_channel(v[0], v[1])?]),
        ),
        case(
            "sub_channel",
            |r| vec![random_tensor(&[2, 3, 2, 2], r), random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.sub_channel(v[0], v[1])?]),
        ),
        case(
            "mul_channel",
            |r| vec![random_tensor(&[2, 3, 2, 2], r), random_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.mul_channel(v[0], v[1])?]),
        ),
        case(
            "div_channel",
            |r| vec![random_tensor(&[2, 3, 2, 2], r), positive_tensor(&[2, 3], r)],
            |t, v| Ok(vec![t.div_channel(v[0], v[1])?]),
        ),
        case("row_sum", |r| vec![random_tensor(&[3, 4], r)], |t, v| Ok(vec![t.row_sum(v[0])?])),
        case("repeat_rows", |r| vec![random_tensor(&[4], r)], |t, v| Ok(vec![t.repeat_rows(v[0], 3)?])),
        case(
            "gather_rows with repeats",
            |r| vec![random_tensor(&[3, 4], r)],
            |t, v| Ok(vec![t.gather_rows(v[0], &[2, 0, 2, 2, 1])?]),
        ),
        case("sum", |r| vec![random_tensor(&[2, 3], r)], |t, v| Ok(vec![t.sum(v[0])])),
        case("mean", |r| vec![random_tensor(&[2, 3], r)], |t, v| Ok(vec![t.mean(v[0])?])),
        case(
            "l2_normalize_rows",
            |r| vec![random_tensor(&[3, 5], r)],
            |t, v| Ok(vec![t.l2_normalize_rows(v[0])?]),
        ),
        case(
            "softmax_cross_entropy",
            |r| vec![random_tensor(&[4, 5], r)],
            |t, v| Ok(vec![t.softmax_cross_entropy(v[0], &[0, 4, 2, 2])?]),
        ),
        case(
            "instance_stats",
            |r| vec![random_tensor(&[2, 3, 3, 4], r)],
            |t, v| {
                let s = t.instance_stats(v[0], DEFAULT_EPSILON)?;
                Ok(vec![s.mean, s.std])
            },
        ),
        case(
            "normalize",
            |r| vec![random_tensor(&[2, 3, 3, 3], r)],
            |t, v| Ok(vec![style_norm::normalize(t, v[0], DEFAULT_EPSILON)?]),
        ),
        case(
            "instance_norm with learnable affine",
            |r| vec![random_tensor(&[2, 3, 3, 3], r), random_tensor(&[3], r), random_tensor(&[3], r)],
            |t, v| Ok(vec![style_norm::instance_norm_affine(t, v[0], v[1], v[2], DEFAULT_EPSILON)?]),
        ),
        case(
            "instance_norm affine-free",
            |r| vec![random_tensor(&[2, 3, 3, 3], r)],
            |t, v| Ok(vec![style_norm::instance_norm(t, v[0], &InstanceNormParams::affine_free(3), DEFAULT_EPSILON)?]),
        ),
        case(
            "adain",
            |r| vec![random_tensor(&[2, 3, 3, 3], r), random_tensor(&[2, 3, 4, 2], r)],
            |t, v| Ok(vec![style_norm::adain(t, v[0], v[1], DEFAULT_EPSILON)?]),
        ),
        GradCase {
            name: "CAIM block (C=4) gate open",
            inputs: |r| {
                let block = CaimBlock::new(4, r);
                let mut v = vec![random_tensor(&[2, 4, 6, 6], r)];
                v.extend(block.parameters().into_iter().cloned());
                v
            },
            build: Box::new(|tape, ts| {
                let block = CaimBlock::from_parts(4, ts[1..].to_vec())?;
                let x = tape.leaf(&ts[0]);
                let bound = block.bind(tape);
                let y = bound.forward(tape, x, Gate::Open)?;
                let mut vs = vec![x];
                vs.extend(bound.vars());
                Ok((vs, vec![y]))
            }),
        },
        tiny_network_case(),
    ]
}

/// Gradient check of each case over seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Vec<(&'static str, GradCheck)> {
    gradient_cases()
        .into_iter()
        .map(|c| {
            let total = (0..seeds)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let inputs = (c.inputs)(&mut rng);
                    check_gradients(&c.build, &inputs, &mut rng)
                })
                .fold(GradCheck::default(), GradCheck::merge);
            (c.name, total)
        })
        .collect()
}

/// Upper bound on the fraction of stencils allowed to straddle a kink.
pub const MAX_STRADDLED_FRACTION: f64 = 0.05;

/// Names of cases that fail the tolerance or lose too many stencils.
pub fn gradient_failures(report: &[(&'static str, GradCheck)]) -> Vec<String> {
    report
        .iter()
        .filter(|(_, g)| {
            let total = (g.compared + g.straddled) as f64;
            !(g.worst <= MAX_REL_ERR) || g.compared == 0 || g.straddled as f64 > MAX_STRADDLED_FRACTION * total
        })
        .map(|(name, g)| format!("{name}: {g:?}"))
        .collect()
}

/// Per-(sample, channel) mean and population std of an N×C×H×W buffer.
pub fn plane_stats(t: &Tensor) -> Vec<(f64, f64)> {
    let hw = t.shape()[2] * t.shape()[3];
    t.data()
        .chunks(hw)
        .map(|p| {
            let m = p.iter().sum::<f64>() / hw as f64;
            let v = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
            (m, v.sqrt())
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct NormReport {
    /// Largest |mean| of an instance-normalised plane.
    pub in_mean_max: f64,
    pub in_std_min: f64,
    pub in_std_max: f64,
    /// Largest |mean(adain) − mean(style)|.
    pub adain_mean_max: f64,
    /// Largest |std(adain) / std(style) − 1|.
    pub adain_std_dev_max: f64,
    /// Largest |adain(x, x) − x| / max|x|.
    pub adain_self_rel_max: f64,
}

/// Statistics of normalised outputs measured by direct loops.
pub fn normalization_report(seeds: u64) -> NormReport {
    let mut r = NormReport {
        in_std_min: f64::INFINITY,
        ..NormReport::default()
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(0.5..20.0);
        let shift = rng.random_range(-5.0..5.0);
        let mut content = random_tensor(&[3, 4, 5, 6], &mut rng);
        content.data_mut().iter_mut().for_each(|v| *v = *v * scale + shift);
        let style = random_tensor(&[3, 4, 7, 3], &mut rng);

        let mut tape = Tape::new();
        let c = tape.constant(content.clone());
        let s = tape.constant(style.clone());
        let normed = style_norm::normalize(&mut tape, c, DEFAULT_EPSILON).unwrap();
        let styled = style_norm::adain(&mut tape, c, s, DEFAULT_EPSILON).unwrap();
        let same = style_norm::adain(&mut tape, c, c, DEFAULT_EPSILON).unwrap();

        for (m, sd) in plane_stats(&tape.tensor(normed)) {
            r.in_mean_max = r.in_mean_max.max(m.abs());
            r.in_std_min = r.in_std_min.min(sd);
            r.in_std_max = r.in_std_max.max(sd);
        }
        for ((mo, so), (ms, ss)) in plane_stats(&tape.tensor(styled)).into_iter().zip(plane_stats(&style)) {
            r.adain_mean_max = r.adain_mean_max.max((mo - ms).abs());
            r.adain_std_dev_max = r.adain_std_dev_max.max((so / ss - 1.0).abs());
        }
        let peak = content.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let diff = tape.tensor(same).max_abs_diff(&content);
        r.adain_self_rel_max = r.adain_self_rel_max.max(diff / peak);
    }
    r
}

/// Random score sets with at most 100 scores; every other set is drawn from a
/// coarse grid so that ties are common.
pub fn random_score_sets(count: usize, seed: u64) -> Vec<caim::metrics::ScoreSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let ng = rng.random_range(1..=40);
            let ni = rng.random_range(1..=(100 - ng));
            let coarse = k % 2 == 0;
            let mut draw = |shift: f64| -> f64 {
                if coarse {
                    (rng.random_range(0..8) as f64 + shift).floor() / 8.0
                } else {
                    rng.random_range(-1.0..1.0) + shift
                }
            };
            let genuine = (0..ng).map(|_| draw(0.8)).collect();
            let impostor = (0..ni).map(|_| draw(0.0)).collect();
            caim::metrics::ScoreSet::new(genuine, impostor).unwrap()
        })
        .collect()
}

/// (FAR, TAR) at threshold `t` by direct counting; accept iff score ≥ t.
fn rates_at(s: &caim::metrics::ScoreSet, t: f64) -> (f64, f64) {
    let fa = s.impostor.iter().filter(|&&x| x >= t).count();
    let ta = s.genuine.iter().filter(|&&x| x >= t).count();
    (fa as f64 / s.impostor.len() as f64, ta as f64 / s.genuine.len() as f64)
}

fn brute_thresholds(s: &caim::metrics::ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    t.push(f64::NEG_INFINITY);
    t.push(f64::INFINITY);
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t
}

pub fn brute_eer(s: &caim::metrics::ScoreSet) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for t in brute_thresholds(s) {
        let (far, tar) = rates_at(s, t);
        let frr = 1.0 - tar;
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), 50.0 * (far + frr));
        }
    }
    best.1
}

pub fn brute_vr(s: &caim::metrics::ScoreSet, target_percent: f64) -> f64 {
    let frac = target_percent / 100.0;
    for t in brute_thresholds(s) {
        let (far, tar) = rates_at(s, t);
        if far <= frac {
            return 100.0 * tar;
        }
    }
    unreachable!("+inf accepts nothing")
}

/// Mann–Whitney U over all genuine/impostor pairs, as a percentage.
pub fn mann_whitney_auc(s: &caim::metrics::ScoreSet) -> f64 {
    let mut twice: u128 = 0;
    for g in &s.genuine {
        for i in &s.impostor {
            twice += if g > i {
                2
            } else if g == i {
                1
            } else {
                0
            };
        }
    }
    100.0 * twice as f64 / (2 * s.genuine.len() as u128 * s.impostor.len() as u128) as f64
}

/// Exact three-way comparison of cos(p, a) and cos(p, b) for integer vectors.
fn cmp_cosine(p: &[i64], a: &[i64], b: &[i64]) -> std::cmp::Ordering {
    let dot = |x: &[i64], y: &[i64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<i64>();
    let (da, db) = (dot(p, a), dot(p, b));
    let (na, nb) = (dot(a, a), dot(b, b));
    // cos ∝ d / sqrt(n); compare sign first, then d²/n by cross-multiplying.
    match da.signum().cmp(&db.signum()) {
        std::cmp::Ordering::Equal => {
            let lhs = (da * da) as i128 * nb as i128;
            let rhs = (db * db) as i128 * na as i128;
            if da >= 0 {
                lhs.cmp(&rhs)
            } else {
                rhs.cmp(&lhs)
            }
        }
        o => o,
    }
}

/// Rank-1 by exhaustive exact comparison; the first maximum wins.
pub fn brute_rank1(g_ids: &[usize], gallery: &[Vec<i64>], p_ids: &[usize], probes: &[Vec<i64>]) -> f64 {
    let mut correct = 0;
    for (pid, p) in p_ids.iter().zip(probes) {
        let mut best = 0;
        for j in 1..gallery.len() {
            if cmp_cosine(p, &gallery[j], &gallery[best]).is_gt() {
                best = j;
            }
        }
        if g_ids[best] == *pid {
            correct += 1;
        }
    }
    100.0 * correct as f64 / probes.len() as f64
}

/// True when two different gallery vectors are exactly equally similar to
/// `p`; such draws are skipped so that only bitwise-identical rows tie.
fn ambiguous(p: &[i64], gallery: &[Vec<i64>]) -> bool {
    gallery.iter().enumerate().any(|(i, a)| {
        gallery[..i]
            .iter()
            .any(|b| a != b && cmp_cosine(p, a, b).is_eq())
    })
}

/// Every disagreement between the library metrics and the brute-force
/// oracles over `count` random score sets and template splits.
pub fn metric_oracle_mismatches(count: usize) -> Vec<String> {
    use caim::metrics::{auc, eer, rank1, roc, vr_at_far, Templates};
    let mut bad = Vec::new();
    for (k, s) in random_score_sets(count, 11).iter().enumerate() {
        let lib_auc = auc(&roc(s).unwrap());
        let a = mann_whitney_auc(s);
        if lib_auc != a {
            bad.push(format!("set {k}: auc {lib_auc} vs mann-whitney {a}"));
        }
        let (e_lib, e) = (eer(s).unwrap(), brute_eer(s));
        if e_lib != e {
            bad.push(format!("set {k}: eer {e_lib} vs {e}"));
        }
        let targets = [0.0, 0.1, 1.0, 5.0, 10.0, 50.0, 100.0];
        for (p, &t) in vr_at_far(s, &targets).unwrap().iter().zip(&targets) {
            let v = brute_vr(s, t);
            if p.tar != v {
                bad.push(format!("set {k}: vr@{t} {} vs {v}", p.tar));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut k = 0;
    while k < count {
        let n_ids = rng.random_range(2..8);
        let dim = rng.random_range(2..6);
        let row = |rng: &mut ChaCha8Rng| -> Vec<i64> {
            loop {
                let r: Vec<i64> = (0..dim).map(|_| rng.random_range(-3..=3)).collect();
                if r.iter().any(|&v| v != 0) {
                    return r;
                }
            }
        };
        let mut g_ids = Vec::new();
        let mut gallery = Vec::new();
        for id in 0..n_ids {
            for _ in 0..rng.random_range(1..3) {
                g_ids.push(id);
                gallery.push(row(&mut rng));
            }
        }
        // Some gallery rows are duplicated under another identity to force ties.
        for _ in 0..rng.random_range(0..3) {
            let src = rng.random_range(0..gallery.len());
            g_ids.push(rng.random_range(0..n_ids));
            gallery.push(gallery[src].clone());
        }
        let n_probes = rng.random_range(1..20);
        let p_ids: Vec<usize> = (0..n_probes).map(|_| rng.random_range(0..n_ids)).collect();
        let probes: Vec<Vec<i64>> = (0..n_probes)
            .map(|_| if rng.random_bool(0.3) { gallery[rng.random_range(0..gallery.len())].clone() } else { row(&mut rng) })
            .collect();
        if probes.iter().any(|p| ambiguous(p, &gallery)) {
            continue;
        }
        let to_templates = |ids: &[usize], rows: &[Vec<i64>]| {
            let data = rows.iter().flatten().map(|&v| v as f64).collect();
            Templates::new(ids.to_vec(), Tensor::new([rows.len(), dim], data).unwrap()).unwrap()
        };
        let lib = rank1(&to_templates(&g_ids, &gallery), &to_templates(&p_ids, &probes)).unwrap();
        let b = brute_rank1(&g_ids, &gallery, &p_ids, &probes);
        if lib != b {
            bad.push(format!("split {k}: rank1 {lib} vs {b}"));
        }
        k += 1;
    }
    bad
}
