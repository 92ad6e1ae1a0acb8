//! Randomized invariants of the metric, decoding, loss and sharpening code.

use std::collections::BTreeMap;

use proptest::prelude::*;
use tadmask_core::decode::{decode_instances, soft_nms, ActionInstance, DecodeConfig};
use tadmask_core::eval::{average_precision, tiou, ScoredSegment};
use tadmask_core::graph::{softmax_rows, Mat};
use tadmask_core::heads::{ClassScoreMatrix, MaskMatrix};
use tadmask_core::losses::{classification_loss, mask_loss, reconstruction_loss, ClassLossConfig, LossTargets, MaskLossConfig};
use tadmask_core::refine::{erode_1d, soft_erode_1d};
use tadmask_core::semisup::{sharpen_class, sharpen_mask, SharpenConfig};

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0..100.0f64, 0.1..30.0f64).prop_map(|(s, l)| (s, s + l))
}

fn instance() -> impl Strategy<Value = ActionInstance> {
    (interval(), 1..4usize, 0.0..1.0f64).prop_map(|((start, end), label, score)| ActionInstance { start, end, label, score })
}

proptest! {
    #[test]
    fn tiou_is_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = tiou(a, b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, tiou(b, a));
        prop_assert!((tiou(a, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_maps(
        preds in prop::collection::vec((interval(), 0.0..1.0f64), 1..20),
        gts in prop::collection::vec(interval(), 1..10),
        thr in 0.3..0.9f64,
    ) {
        let p: Vec<ScoredSegment> = preds.iter().map(|&((s, e), score)| ScoredSegment { video: "v", start: s, end: e, score }).collect();
        let q: Vec<ScoredSegment> = p.iter().map(|x| ScoredSegment { score: (3.0 * x.score).exp() + 1.0, ..x.clone() }).collect();
        let g: BTreeMap<&str, Vec<(f64, f64)>> = [("v", gts)].into();
        let a = average_precision(&p, &g, thr);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, average_precision(&q, &g, thr));
    }

    #[test]
    fn soft_nms_only_decays_and_keeps_a_subset(cands in prop::collection::vec(instance(), 0..30)) {
        let cfg = DecodeConfig::default();
        let out = soft_nms(&cands, &cfg);
        prop_assert!(out.len() <= cands.len().min(cfg.max_outputs));
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        for o in &out {
            prop_assert!(cands.iter().any(|c| c.start == o.start && c.end == o.end && c.label == o.label && o.score <= c.score));
        }
    }

    #[test]
    fn erosion_splits_mask_into_interior_and_band(bits in prop::collection::vec(any::<bool>(), 1..64), k in prop::sample::select(vec![3usize, 5, 7])) {
        let mask: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let (inner, band) = erode_1d(&mask, k);
        for i in 0..mask.len() {
            prop_assert!(inner[i] <= mask[i]);
            prop_assert_eq!(inner[i] + band[i], mask[i]);
        }
        // soft erosion approaches the hard one from below
        let soft = soft_erode_1d(&mask, k, 0.01);
        for i in 0..mask.len() {
            prop_assert!(soft[i] <= inner[i] + 1e-9);
            prop_assert!((soft[i] - inner[i]).abs() < 0.03);
        }
    }

    #[test]
    fn mask_loss_is_permutation_equivariant(
        vals in prop::collection::vec(0.01..0.99f64, 36),
        bits in prop::collection::vec(any::<bool>(), 36),
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let m = Mat::from_shape_vec((6, 6), vals).unwrap();
        let g = Mat::from_shape_vec((6, 6), bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let valid = vec![true; 6];
        let cfg = MaskLossConfig::default();
        let permute = |x: &Mat| Mat::from_shape_fn((6, 6), |(i, j)| x[[perm[i], perm[j]]]);
        let a = mask_loss(&m, &g, &valid, &cfg);
        let b = mask_loss(&permute(&m), &permute(&g), &valid, &cfg);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn empty_tail_set_gives_plain_bce(
        logits in prop::collection::vec(-3.0..3.0f64, 15),
        labels in prop::collection::vec(1..=3usize, 5),
    ) {
        let p = softmax_rows(&Mat::from_shape_vec((5, 3), logits).unwrap());
        let targets = LossTargets {
            class_label: labels.iter().map(|&l| Some(l)).collect(),
            mask: Mat::zeros((5, 5)),
            anchor_valid: vec![true; 5],
            num_classes: 2,
        };
        let got = classification_loss(&p, &targets, &ClassLossConfig { tail_classes: Default::default(), epsilon: 0.3 });
        let mut want = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            for k in 0..3 {
                let q = p[[t, k]].clamp(1e-7, 1.0 - 1e-7);
                want -= if k + 1 == y { q.ln() } else { (1.0 - q).ln() };
            }
        }
        prop_assert!((got - want / 5.0).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_loss_ignores_row_scale(
        vals in prop::collection::vec(-2.0..2.0f64, 12),
        target in prop::collection::vec(-2.0..2.0f64, 12),
        scales in prop::collection::vec(0.1..10.0f64, 4),
    ) {
        let r = Mat::from_shape_vec((4, 3), vals).unwrap();
        let t = Mat::from_shape_vec((4, 3), target).unwrap();
        let scaled = Mat::from_shape_fn((4, 3), |(i, j)| r[[i, j]] * scales[i]);
        prop_assert!((reconstruction_loss(&r, &t) - reconstruction_loss(&scaled, &t)).abs() < 1e-9);
    }

    #[test]
    fn sharpening_preserves_argmax(logits in prop::collection::vec(-5.0..5.0f64, 4)) {
        let z = Mat::from_shape_vec((4, 1), logits.clone()).unwrap();
        let pseudo = sharpen_class(&z, &SharpenConfig::default());
        let argmax = (0..4).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        prop_assert_eq!(pseudo[0].label, argmax + 1);
    }

    #[test]
    fn mask_sharpening_moves_away_from_half(x in -8.0..8.0f64) {
        let z = Mat::from_elem((1, 1), x);
        let hard = sharpen_mask(&z, &SharpenConfig::default());
        let soft = 1.0 / (1.0 + (-x / 0.7).exp());
        prop_assert!((soft - 0.5).abs() >= (1.0 / (1.0 + (-x).exp()) - 0.5).abs() - 1e-15);
        prop_assert_eq!(hard[[0, 0]], if soft >= 0.7 { 1.0 } else { 0.0 });
    }

    #[test]
    fn decoded_segments_lie_inside_the_video(
        p_vals in prop::collection::vec(0.01..1.0f64, 24),
        m_vals in prop::collection::vec(0.0..1.0f64, 64),
        duration in 10.0..200.0f64,
    ) {
        let raw = Mat::from_shape_vec((3, 8), p_vals).unwrap();
        let p = softmax_rows(&raw.t().to_owned()).t().to_owned();
        let probs = ClassScoreMatrix::new(p).unwrap();
        let masks = MaskMatrix::new(Mat::from_shape_vec((8, 8), m_vals).unwrap()).unwrap();
        for d in decode_instances(&probs, &masks, duration, &DecodeConfig::default()) {
            prop_assert!(0.0 <= d.start && d.start < d.end && d.end <= duration + 1e-9);
            prop_assert!((0.0..=1.0).contains(&d.score));
            prop_assert!((1..=2).contains(&d.label));
        }
    }
}
