mod common;

use common::*;
use lifelong_bn::autodiff::Graph;
use lifelong_bn::checkpoint::{decode_checkpoint, encode_checkpoint};
use lifelong_bn::data::by_volume;
use lifelong_bn::lifelong::{evaluate, select_closest_domain};
use lifelong_bn::metrics::{dice_score, DiceCounts};
use lifelong_bn::norm::{BnState, DomainBnBank};
use lifelong_bn::preproc::{histogram_match, percentile_normalize, ReferenceCdf};
use lifelong_bn::synth::{apply_domain, DomainTransform, SplitCounts};
use lifelong_bn::{DomainId, Mode, SegNet32, Tensor};
use proptest::prelude::*;

fn labels(len: usize, k: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..k, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_bounded_and_symmetric(a in labels(64, 4), b in labels(64, 4)) {
        let ab = dice_score(&a, &b, 4).unwrap();
        let ba = dice_score(&b, &a, 4).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!(ab.per_class.iter().all(|&d| (0.0..=1.0).contains(&d)));
        prop_assert_eq!(dice_score(&a, &a, 4).unwrap().average, 1.0);
    }

    #[test]
    fn volume_dice_ignores_slice_order(a in labels(48, 3), b in labels(48, 3), split in 1usize..47) {
        let mut fwd = DiceCounts::new(3);
        fwd.add(&a[..split], &b[..split]).unwrap();
        fwd.add(&a[split..], &b[split..]).unwrap();
        let mut rev = DiceCounts::new(3);
        rev.add(&a[split..], &b[split..]).unwrap();
        rev.add(&a[..split], &b[..split]).unwrap();
        prop_assert_eq!(fwd.report(), rev.report());
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-20.0f64..20.0, 24)) {
        let mut g = Graph::new();
        let id = g.leaf(Tensor::new(vec![2, 3, 2, 2], x).unwrap(), false);
        let p = g.softmax_channels(id).unwrap();
        let d = g.value(p).data();
        for n in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|c| d[n * 12 + c * 4 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_converge_geometrically(m in -5.0f64..5.0, v in 0.1f64..5.0, steps in 1usize..40) {
        let mut s = BnState::<f64>::fresh(1, 0.9);
        for _ in 0..steps {
            s.update(0, &[m], &[v]).unwrap();
        }
        let w = 0.9f64.powi(steps as i32);
        prop_assert!((s.running_mean[0] - (1.0 - w) * m).abs() < 1e-9);
        prop_assert!((s.running_var[0] - (w + (1.0 - w) * v)).abs() < 1e-9);
    }

    #[test]
    fn histogram_matching_is_monotone(src in prop::collection::vec(0.0f32..3.0, 50), refv in prop::collection::vec(0.0f32..1.0, 80)) {
        let r = ReferenceCdf::build([&refv[..]], 32).unwrap();
        let out = histogram_match(&src, &r);
        for i in 0..src.len() {
            for j in 0..src.len() {
                if src[i] < src[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn percentile_normalization_is_scale_invariant(x in prop::collection::vec(0.01f32..10.0, 30), scale in 0.1f32..10.0) {
        let mut a = x.clone();
        let mut b: Vec<f32> = x.iter().map(|v| v * scale).collect();
        percentile_normalize(&mut [&mut a[..]]).unwrap();
        percentile_normalize(&mut [&mut b[..]]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-4 * p.abs().max(1.0));
        }
    }

    #[test]
    fn monotone_transforms_keep_pixel_order(x in prop::collection::vec(0.0f32..2.0, 16), gamma in 0.2f64..3.0, scale in 0.1f64..3.0, offset in -0.5f64..0.5) {
        let t = DomainTransform { gamma, scale, offset, ..DomainTransform::identity() };
        let y = apply_domain(std::slice::from_ref(&x), [4, 4], &t).unwrap().remove(0);
        for i in 0..16 {
            prop_assert!(y[i] >= 0.0);
            for j in 0..16 {
                if x[i] < x[j] {
                    prop_assert!(y[i] <= y[j]);
                }
            }
        }
    }

    #[test]
    fn bank_clone_is_independent(channels in prop::collection::vec(1usize..5, 1..4), value in -2.0f64..2.0) {
        let mut bank = DomainBnBank::<f64>::new(channels);
        bank.register(DomainId(1), 1e-5, 0.9).unwrap();
        bank.clone_domain(DomainId(1), DomainId(2)).unwrap();
        bank.get_mut(DomainId(2)).unwrap()[0].params.beta[0] = value;
        prop_assert_eq!(bank.get(DomainId(1)).unwrap()[0].params.beta[0], 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_is_idempotent(seed in 0u64..1000, tweak in -1.0f32..1.0) {
        let mut net = SegNet32::build(micro_network(), &[DomainId(1), DomainId(4)], seed).unwrap();
        net.bank.get_mut(DomainId(4)).unwrap()[1].params.gamma[0] = tweak;
        net.bank.get_mut(DomainId(4)).unwrap()[1].state.running_var[2] = 1.0 + tweak.abs();
        let bytes = encode_checkpoint(&net, seed).unwrap();
        let (back, s) = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(encode_checkpoint(&back, s).unwrap(), bytes);
    }

    #[test]
    fn train_forward_touches_only_its_domain(seed in 0u64..1000) {
        let ds = micro_dataset(1, 1, SplitCounts { train: 1, val: 1, test: 1 }, seed);
        let (x, _) = lifelong_bn::data::batch_of::<f32>(&ds.train.iter().collect::<Vec<_>>()).unwrap();
        let mut net = SegNet32::build(micro_network(), &[DomainId(1), DomainId(2), DomainId(3)], seed).unwrap();
        let before = net.clone();
        net.forward(&x, DomainId(2), Mode::Train).unwrap();
        prop_assert_eq!(net.bank.get(DomainId(1)).unwrap(), before.bank.get(DomainId(1)).unwrap());
        prop_assert_eq!(net.bank.get(DomainId(3)).unwrap(), before.bank.get(DomainId(3)).unwrap());
        prop_assert_ne!(net.bank.get(DomainId(2)).unwrap(), before.bank.get(DomainId(2)).unwrap());
        prop_assert_eq!(&net.shared, &before.shared);
    }

    #[test]
    fn selection_ignores_probe_order(seed in 0u64..1000) {
        let ds = micro_dataset(1, 2, SplitCounts { train: 3, val: 1, test: 1 }, seed);
        let net = SegNet32::build(micro_network(), &[DomainId(1), DomainId(2)], seed).unwrap();
        let mut shuffled = ds.train.clone();
        let len = shuffled.len();
        shuffled.rotate_left(seed as usize % len);
        prop_assert_eq!(select_closest_domain(&net, &ds.train).unwrap(), select_closest_domain(&net, &shuffled).unwrap());
        prop_assert_eq!(evaluate(&net, &ds.train, DomainId(1)).unwrap(), evaluate(&net, &shuffled, DomainId(1)).unwrap());
        prop_assert_eq!(by_volume(&shuffled).len(), 3);
    }
}
