mod common;

use proptest::prelude::*;

use afpa_core::afpa::{attention_head, segment};
use afpa_core::corpus::{decode, encode};
use afpa_core::metrics::{auc, pauc, Label};
use afpa_core::model::score_from_logits;
use afpa_core::tensor::{concat, Tape, Tensor};
use afpa_core::trainer::{cosine_lr, TrainConfig};

use common::{pairwise_auc, records, sweep_pauc};

/// Up to 200 labelled scores on a 1/1000 grid, with both labels present and
/// plenty of ties.
fn scored() -> impl Strategy<Value = Vec<(f64, bool)>> {
    (2usize..200).prop_flat_map(|n| {
        prop::collection::vec((0u32..60, any::<bool>()), n).prop_map(|mut v| {
            v[0].1 = false;
            v[1].1 = true;
            v.into_iter().map(|(s, l)| (f64::from(s) / 1000.0, l)).collect()
        })
    })
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_equals_pairwise_count(s in scored()) {
        let got = auc(&records(&s)).unwrap();
        prop_assert!((got - pairwise_auc(&s)).abs() < 1e-12);
    }

    #[test]
    fn pauc_equals_threshold_sweep(s in scored(), p in prop::sample::select(vec![0.05, 0.1, 0.25, 0.5, 1.0])) {
        let got = pauc(&records(&s), p).unwrap();
        prop_assert!((got - sweep_pauc(&s, p, 100_000)).abs() < 1e-6, "{got}");
        prop_assert!(got <= 1.0);
    }

    #[test]
    fn pauc_at_one_is_auc(s in scored()) {
        let r = records(&s);
        prop_assert_eq!(pauc(&r, 1.0).unwrap(), auc(&r).unwrap());
    }

    #[test]
    fn auc_ignores_monotone_transforms(s in scored()) {
        let warped: Vec<(f64, bool)> = s.iter().map(|&(x, l)| ((3.0 * x).exp() - 7.0, l)).collect();
        prop_assert_eq!(auc(&records(&warped)).unwrap(), auc(&records(&s)).unwrap());
    }

    #[test]
    fn flipping_labels_complements_auc(n in 2usize..150, seed in any::<u64>()) {
        let s: Vec<(f64, bool)> = (0..n)
            .map(|i| ((i as f64 * 0.618 + seed as f64 * 1e-9).fract(), i % 2 == 0 || (seed >> (i % 64)) & 1 == 1))
            .collect();
        prop_assume!(s.iter().any(|x| x.1) && s.iter().any(|x| !x.1));
        let mut r = records(&s);
        let a = auc(&r).unwrap();
        r.iter_mut().for_each(|x| x.label = x.label.flipped());
        prop_assert!((auc(&r).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!(r.iter().any(|x| x.label == Label::Normal));
    }

    #[test]
    fn segments_concatenate_back(rows in 1usize..6, heads in 1usize..5, width in 1usize..5, seed in any::<u64>()) {
        let x = Tensor::from_fn(&[rows, heads * width], |i| (i as f64 + seed as f64).sin());
        let parts = segment(&x, heads).unwrap();
        prop_assert_eq!(parts.len(), heads);
        let tape = Tape::new();
        let vars: Vec<_> = parts.into_iter().map(|p| tape.constant(p)).collect();
        prop_assert_eq!(concat(&vars, 1).unwrap().to_tensor(), x);
    }

    #[test]
    fn attention_rows_are_stochastic(q in tensor(5, 3), k in tensor(5, 3), v in tensor(5, 3)) {
        let tape = Tape::new();
        let (out, d) = attention_head(tape.constant(q), tape.constant(k), tape.constant(v)).unwrap();
        let d = d.to_tensor();
        for r in 0..5 {
            prop_assert!((d.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.row(r).iter().all(|&x| x >= 0.0));
        }
        prop_assert_eq!(out.shape(), vec![5, 3]);
    }

    #[test]
    fn tensor_files_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let t = Tensor::from_fn(&shape, |i| f64::from(((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 7.0));
        let entries = vec![("w".to_string(), t)];
        let back = decode(&encode(&entries).unwrap(), "mem").unwrap();
        prop_assert_eq!(back, entries);
    }

    #[test]
    fn scores_ignore_logit_offsets(logits in prop::collection::vec(-30.0f64..30.0, 2..10), shift in -50.0f64..50.0) {
        let claimed = logits.len() / 2;
        let a = score_from_logits(&logits, claimed).unwrap();
        let moved: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        prop_assert!(a >= 0.0);
        prop_assert!((a - score_from_logits(&moved, claimed).unwrap()).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn cosine_schedule_never_rises(total in 1usize..500) {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, &cfg).unwrap()).collect();
        prop_assert_eq!(lrs[0], cfg.lr_max);
        prop_assert_eq!(lrs[total], cfg.lr_min);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
