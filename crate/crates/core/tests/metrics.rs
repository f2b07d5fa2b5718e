use proptest::prelude::*;
use rand::Rng;

use compdef::attack::AttackResult;
use compdef::backbone::FeatureGeometry;
use compdef::eval::{accuracy, attack_success_rate, localization_labels, localization_roc, roc_curve, AttackRecord, RocMode};
use compdef::image::{Image, PatchMask};
use compdef::rng::rng_from_seed;

fn record(image: usize, label: usize, clean_label: usize, success: bool) -> AttackRecord {
    AttackRecord {
        image,
        label,
        clean_label,
        result: AttackResult {
            success,
            queries: 1,
            patches: vec![],
            trace: vec![1.0],
            final_label: if success { label + 1 } else { label },
            final_probabilities: vec![],
            image: Image::filled(16, 16, [0.0; 3]),
            mask: PatchMask::empty(16, 16),
        },
    }
}

#[test]
fn oracle_and_constant_accuracy() {
    let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
    assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(accuracy(&vec![3; 80], &labels).unwrap(), 0.125);
}

#[test]
fn accuracy_hand_count() {
    let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
    let pred = [0, 1, 1, 0, 2, 2, 0, 0, 2, 1];
    // hits at 0, 1, 3, 5, 6, 8
    assert_eq!(accuracy(&pred, &labels).unwrap(), 0.6);
    assert!(accuracy(&[], &[]).is_err());
}

#[test]
fn success_rate_examples() {
    let recs: Vec<AttackRecord> = (0..10).map(|i| record(i, 1, 1, i < 4)).collect();
    assert_eq!(attack_success_rate(&recs).unwrap(), 0.4);
    let none: Vec<AttackRecord> = (0..5).map(|i| record(i, 2, 2, false)).collect();
    assert_eq!(attack_success_rate(&none).unwrap(), 0.0);
    assert!(attack_success_rate(&[]).is_err());
    assert!(attack_success_rate(&[record(0, 1, 1, true), record(1, 1, 0, true)]).is_err());
}

proptest! {
    #[test]
    fn success_rate_matches_recount(flags in prop::collection::vec(any::<bool>(), 1..60)) {
        let recs: Vec<AttackRecord> = flags.iter().enumerate().map(|(i, &s)| record(i, 0, 0, s)).collect();
        let expected = flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64;
        prop_assert_eq!(attack_success_rate(&recs).unwrap(), expected);
    }
}

fn geometry() -> FeatureGeometry {
    FeatureGeometry {
        image_height: 64,
        image_width: 64,
        map_height: 15,
        map_width: 15,
        receptive_field: 8,
        step: 4,
    }
}

#[test]
fn empty_and_full_masks() {
    let g = geometry();
    let empty = PatchMask::empty(64, 64);
    assert!(localization_labels(&empty, &g, 0.5).unwrap().iter().all(|&l| !l));
    let mut full = PatchMask::empty(64, 64);
    for r in 0..64 {
        for c in 0..64 {
            full.set(r, c);
        }
    }
    assert!(localization_labels(&full, &g, 0.5).unwrap().iter().all(|&l| l));
    assert!(localization_labels(&PatchMask::empty(32, 64), &g, 0.5).is_err());
}

#[test]
fn square_patch_labels_by_overlap_arithmetic() {
    // 35x35 patch with top-left corner (10, 20): rows 10..45, columns 20..55.
    let mut mask = PatchMask::empty(64, 64);
    for r in 10..45 {
        for c in 20..55 {
            mask.set(r, c);
        }
    }
    let labels = localization_labels(&mask, &geometry(), 0.5).unwrap();
    let overlap = |start: usize, lo: usize, hi: usize| {
        let (a, b) = (start.max(lo), (start + 8).min(hi));
        b.saturating_sub(a)
    };
    let mut positives = 0;
    for r in 0..15 {
        for c in 0..15 {
            let covered = overlap(4 * r, 10, 45) * overlap(4 * c, 20, 55);
            assert_eq!(labels[r * 15 + c], covered >= 32, "position ({r}, {c})");
            positives += usize::from(covered >= 32);
        }
    }
    // Row coverage: 8 pixels for rows 3..=9, 6 for row 2, 5 for row 10, at most 2 elsewhere.
    // Column coverage: 8 for columns 5..=11, 7 for 12, 4 for 4, 3 for 13.
    // Full rows take columns 4..=12 (7 x 9); rows 2 and 10 take columns 5..=12 (2 x 8).
    assert_eq!(positives, 63 + 16);
}

#[test]
fn separating_and_inverted_scores() {
    let scores = vec![vec![0.9, 0.8, 0.1], vec![0.7, 0.2]];
    let labels = vec![vec![true, true, false], vec![true, false]];
    assert_eq!(localization_roc(&scores, &labels, RocMode::Pooled).unwrap().auc, 1.0);
    let inverted: Vec<Vec<bool>> = labels.iter().map(|l| l.iter().map(|x| !x).collect()).collect();
    assert_eq!(localization_roc(&scores, &inverted, RocMode::Pooled).unwrap().auc, 0.0);
    let all_pos = vec![vec![true; 3]];
    assert!(localization_roc(&[vec![0.1, 0.2, 0.3]], &all_pos, RocMode::Pooled).is_err());
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = rng_from_seed(10);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
    let auc = roc_curve(&scores, &labels).unwrap().auc;
    assert!((auc - 0.5).abs() <= 0.02, "{auc}");
}

#[test]
fn per_image_mode_averages() {
    let scores = vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![0.5, 0.5]];
    let labels = vec![vec![true, false], vec![true, false], vec![true, true]];
    let roc = localization_roc(&scores, &labels, RocMode::PerImage).unwrap();
    assert_eq!(roc.auc, 0.5);
    assert_eq!(roc.points.len(), 101);
    assert!(roc.points.windows(2).all(|w| w[1].tpr >= w[0].tpr));
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((-50.0f64..50.0, any::<bool>()), 2..200)
        .prop_filter("needs both labels", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transforms((scores, labels) in scored_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = roc_curve(&scores, &labels).unwrap().auc;
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3) + s).collect();
        let logistic: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s / 10.0).exp())).collect();
        for t in [affine, cubic, logistic] {
            prop_assert!((roc_curve(&t, &labels).unwrap().auc - base).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_points_are_monotone((scores, labels) in scored_labels()) {
        let roc = roc_curve(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        prop_assert_eq!((roc.points[0].fpr, roc.points[0].tpr), (0.0, 0.0));
        let last = roc.points[roc.points.len() - 1];
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold);
        }
    }

    #[test]
    fn auc_complements_when_labels_flip((scores, labels) in scored_labels()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = roc_curve(&scores, &labels).unwrap().auc;
        let b = roc_curve(&scores, &flipped).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn roc_csv_is_versioned() {
    let roc = roc_curve(&[0.3, 0.1], &[true, false]).unwrap();
    let csv = roc.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# compdef-roc v1");
    assert_eq!(lines[1], "threshold,fpr,tpr");
    assert_eq!(lines[2], "inf,0,0");
    assert_eq!(lines.len(), 5);
}
