mod common;

use caim::style_norm::{self, DEFAULT_EPSILON};
use caim::tape::Tape;
use caim::tensor::Tensor;
use common::{normalization_report, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, q) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * ci + c) * h + r as usize) * wd + q as usize];
                                acc += xv * w.data()[((o * ci + c) * k + u) * k + v];
                            }
                        }
                    }
                    out[((s * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new([n, co, ho, wo], out).unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random_tensor(&[2, 3, 7, 6], &mut rng);
            let w = random_tensor(&[4, 3, 3, 3], &mut rng);
            let b = random_tensor(&[4], &mut rng);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            let expected = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(tape.shape(y), expected.shape());
            assert!(tape.tensor(y).max_abs_diff(&expected) <= 1e-12);
        }
    }
}

#[test]
fn dense_and_pooling_match_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&[3, 5], &mut rng);
    let w = random_tensor(&[4, 5], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let f = random_tensor(&[2, 3, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv, fv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b), tape.leaf(&f));
    let y = tape.dense(xv, wv, bv).unwrap();
    let g = tape.global_average_pool(fv).unwrap();
    for n in 0..3 {
        for o in 0..4 {
            let e: f64 = b.data()[o] + (0..5).map(|i| x.data()[n * 5 + i] * w.data()[o * 5 + i]).sum::<f64>();
            assert!((tape.value(y)[n * 4 + o] - e).abs() <= 1e-12);
        }
    }
    for (plane, &m) in f.data().chunks(20).zip(tape.value(g)) {
        assert!((plane.iter().sum::<f64>() / 20.0 - m).abs() <= 1e-12);
    }
}

#[test]
fn normalisation_properties_hold() {
    let r = normalization_report(20);
    assert!(r.in_mean_max <= 1e-6, "{r:?}");
    assert!(r.in_std_min >= 0.999 && r.in_std_max <= 1.0, "{r:?}");
    assert!(r.adain_mean_max <= 1e-6, "{r:?}");
    assert!(r.adain_std_dev_max <= 1e-3, "{r:?}");
    assert!(r.adain_self_rel_max <= 1e-3, "{r:?}");
}

#[test]
fn instance_norm_uses_population_variance() {
    let x = Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = tape.instance_stats(v, DEFAULT_EPSILON).unwrap();
    assert_eq!(tape.value(s.mean), &[2.5]);
    assert!((tape.value(s.std)[0] - (1.25f64 + DEFAULT_EPSILON).sqrt()).abs() < 1e-15);
    let y = style_norm::normalize(&mut tape, v, DEFAULT_EPSILON).unwrap();
    let denom = (1.25f64 + DEFAULT_EPSILON).sqrt();
    for (o, x) in tape.value(y).iter().zip([1.0, 2.0, 3.0, 4.0]) {
        assert!((o - (x - 2.5) / denom).abs() < 1e-15);
    }
}

#[test]
fn metrics_agree_with_brute_force() {
    let bad = common::metric_oracle_mismatches(50);
    assert!(bad.is_empty(), "{bad:#?}");
}
