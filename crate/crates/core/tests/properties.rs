mod common;

use caim::checkpoint::Checkpoint;
use caim::metrics::{auc, eer, roc, ScoreSet};
use caim::style_norm::{normalize, DEFAULT_EPSILON};
use caim::trainer::{make_pairs, PairLabel};
use caim::{count_block_cost, CaimBlock, Gate, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor_strategy(max_n: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_n, 1..=4usize, 2..=6usize, 2..=6usize).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-50.0f64..50.0, n * c * h * w).prop_map(move |d| Tensor::new([n, c, h, w], d).unwrap())
    })
}

fn scores() -> impl Strategy<Value = ScoreSet> {
    (
        prop::collection::vec(-10.0f64..10.0, 1..40),
        prop::collection::vec(-10.0f64..10.0, 1..60),
    )
        .prop_map(|(g, i)| ScoreSet::new(g, i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_planes_are_centred_and_finite(x in tensor_strategy(3)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = normalize(&mut tape, v, DEFAULT_EPSILON).unwrap();
        let out = tape.tensor(y);
        prop_assert!(out.is_finite());
        for (m, s) in common::plane_stats(&out) {
            prop_assert!(m.abs() <= 1e-6);
            prop_assert!(s <= 1.0);
        }
    }

    #[test]
    fn closed_gate_is_bitwise_identity(x in tensor_strategy(2), seed in any::<u64>()) {
        let c = x.shape()[1];
        let block = CaimBlock::new(c, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let bound = block.bind(&mut tape);
        let v = tape.leaf(&x.clone().with_grad());
        let y = bound.forward(&mut tape, v, Gate::Closed).unwrap();
        prop_assert!(tape.tensor(y).bit_eq(&x));
        let sq = tape.square(y);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        for p in bound.vars() {
            prop_assert!(grads.get(p).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn open_gate_output_is_finite(x in tensor_strategy(2), seed in any::<u64>()) {
        let block = CaimBlock::new(x.shape()[1], &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let bound = block.bind(&mut tape);
        let v = tape.constant(x);
        let y = bound.forward(&mut tape, v, Gate::Open).unwrap();
        prop_assert!(tape.tensor(y).is_finite());
    }

    #[test]
    fn auc_and_eer_are_bounded_and_order_invariant(s in scores(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let area = auc(&roc(&s).unwrap());
        let e = eer(&s).unwrap();
        prop_assert!((0.0..=100.0).contains(&area));
        prop_assert!((0.0..=100.0).contains(&e));
        let mapped = ScoreSet::new(
            s.genuine.iter().map(|x| (a * x + b).tanh() * 7.0 + x.powi(3)).collect(),
            s.impostor.iter().map(|x| (a * x + b).tanh() * 7.0 + x.powi(3)).collect(),
        ).unwrap();
        prop_assert_eq!(auc(&roc(&mapped).unwrap()), area);
        prop_assert_eq!(eer(&mapped).unwrap(), e);
        let flipped = auc(&roc(&s.swapped()).unwrap());
        prop_assert!((area + flipped - 100.0).abs() < 1e-9);
    }

    #[test]
    fn pair_batches_respect_labels(
        ids in prop::collection::vec(0usize..6, 4..30),
        batch in 4usize..20,
        seed in any::<u64>(),
        epoch in 0usize..5,
    ) {
        prop_assume!(ids.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
        let batches = make_pairs(&ids, &ids, batch, 0.5, seed, epoch).unwrap();
        let again = make_pairs(&ids, &ids, batch, 0.5, seed, epoch).unwrap();
        prop_assert_eq!(&batches, &again);
        let n_genuine = (0.5 * batch as f64).round() as usize;
        let mut seen = std::collections::BTreeSet::new();
        for b in &batches {
            prop_assert_eq!(b.len(), batch);
            for (k, p) in b.iter().enumerate() {
                let same = ids[p.source] == ids[p.target];
                match p.label {
                    PairLabel::Genuine => {
                        prop_assert!(k < n_genuine && same);
                        seen.insert((p.source, p.target));
                    }
                    PairLabel::Impostor => prop_assert!(k >= n_genuine && !same),
                }
            }
        }
        let all_genuine = ids.iter().map(|a| ids.iter().filter(|b| *b == a).count()).sum::<usize>();
        prop_assert_eq!(seen.len(), all_genuine);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(0usize..5, 0..4), 1..6),
        seed in any::<u64>(),
    ) {
        let mut ck = Checkpoint::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, s) in shapes.iter().enumerate() {
            ck.push(format!("t{i}"), common::random_tensor(s, &mut rng)).unwrap();
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        let mut bad = bytes;
        let k = (seed as usize) % bad.len();
        bad[k] ^= 0x80;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn block_cost_matches_closed_form(c in 1usize..256, h in 1usize..32, w in 1usize..32) {
        let cost = count_block_cost(c, h, w);
        let (c, hw) = (c as u64, (h * w) as u64);
        prop_assert_eq!(cost.params, 2 * (9 * c * c + c) + 2 * (c * c + c));
        prop_assert_eq!(cost.flops, 2 * (2 * 9 * c * c * hw) + 2 * (2 * c * c) + 2 * c * hw);
    }
}
