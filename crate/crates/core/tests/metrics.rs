mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use refseg::image::Mask;
use refseg::metrics::{category_name, EvalAccumulator, Overlap, Report, THRESHOLDS};

use common::rng;

/// Independent pixel-loop evaluation of a list of `(pred, gt, category)`.
struct Oracle {
    ious: Vec<f64>,
    inter: u64,
    union: u64,
    per_category: BTreeMap<u8, (Vec<f64>, u64, u64)>,
}

fn sorted_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len() as f64
}

fn oracle(pairs: &[(Mask, Mask, u8)]) -> Oracle {
    let mut o = Oracle {
        ious: Vec::new(),
        inter: 0,
        union: 0,
        per_category: BTreeMap::new(),
    };
    for (p, g, cat) in pairs {
        let (mut i, mut u) = (0u64, 0u64);
        for y in 0..g.height {
            for x in 0..g.width {
                let (a, b) = (p.get(x, y), g.get(x, y));
                if a && b {
                    i += 1;
                }
                if a || b {
                    u += 1;
                }
            }
        }
        let iou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        o.ious.push(iou);
        o.inter += i;
        o.union += u;
        let e = o.per_category.entry(*cat).or_default();
        e.0.push(iou);
        e.1 += i;
        e.2 += u;
    }
    o
}

fn random_mask<R: Rng>(r: &mut R, w: usize, h: usize) -> Mask {
    let density = r.random_range(0.0..1.0);
    Mask::from_labels(
        w,
        h,
        (0..w * h)
            .map(|_| u8::from(r.random_bool(density)))
            .collect(),
    )
    .unwrap()
}

fn report_of(pairs: &[(Mask, Mask, u8)]) -> Report {
    let mut acc = EvalAccumulator::new();
    for (p, g, c) in pairs {
        acc.add(p, g, *c).unwrap();
    }
    acc.finalize().unwrap()
}

#[test]
fn report_matches_the_pixel_loop_oracle_exactly() {
    let mut r = rng(1);
    let pairs: Vec<(Mask, Mask, u8)> = (0..100)
        .map(|_| {
            (
                random_mask(&mut r, 16, 16),
                random_mask(&mut r, 16, 16),
                r.random_range(0..4),
            )
        })
        .collect();
    let o = oracle(&pairs);
    let report = report_of(&pairs);

    let n = pairs.len() as f64;
    for (t, got) in THRESHOLDS.iter().zip(report.precisions()) {
        let want = o.ious.iter().filter(|&&v| v > *t).count() as f64 / n;
        assert_eq!(got, want, "Pr@{t}");
    }
    assert_eq!(report.oiou, o.inter as f64 / o.union as f64);
    assert_eq!(report.miou, sorted_mean(&o.ious));
    assert_eq!(report.per_category.len(), o.per_category.len());
    for (cat, (ious, i, u)) in &o.per_category {
        let c = &report.per_category[&category_name(*cat)];
        assert_eq!(c.count, ious.len());
        assert_eq!(c.miou, sorted_mean(ious));
        assert_eq!(c.oiou, *i as f64 / *u as f64);
    }
}

#[test]
fn large_and_small_targets_separate_global_and_mean_iou() {
    let overlaps = [
        Overlap {
            intersection: 90,
            union: 100,
        },
        Overlap {
            intersection: 1,
            union: 10,
        },
    ];
    let mut acc = EvalAccumulator::new();
    for o in overlaps {
        acc.add_overlap(o, 0);
    }
    let report = acc.finalize().unwrap();
    assert_eq!(report.oiou, 91.0 / 110.0);
    assert_eq!(format!("{:.3}", report.oiou), "0.827");
    assert_eq!(report.miou, 0.5);
}

#[test]
fn two_sample_hand_example() {
    let mut acc = EvalAccumulator::new();
    acc.add_overlap(
        Overlap {
            intersection: 6,
            union: 10,
        },
        1,
    );
    acc.add_overlap(
        Overlap {
            intersection: 4,
            union: 10,
        },
        1,
    );
    let report = acc.finalize().unwrap();
    assert_eq!(report.pr50, 0.5);
    assert_eq!(report.miou, 0.5);
    assert_eq!(report.per_category["circle"].count, 2);
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let mut r = rng(2);
    let pairs: Vec<(Mask, Mask, u8)> = (0..10)
        .map(|_| {
            let m = random_mask(&mut r, 16, 16);
            (m.clone(), m, r.random_range(0..4))
        })
        .collect();
    let report = report_of(&pairs);
    assert_eq!(report.precisions(), [1.0; 5]);
    assert_eq!((report.oiou, report.miou), (1.0, 1.0));
    // an empty prediction of an empty target is a perfect match
    let empty = Mask::new(4, 4);
    assert_eq!(report_of(&[(empty.clone(), empty, 0)]).miou, 1.0);
}

#[test]
fn empty_and_mismatched_inputs_are_errors() {
    assert!(EvalAccumulator::new().finalize().is_err());
    let mut acc = EvalAccumulator::new();
    assert!(acc.add(&Mask::new(4, 4), &Mask::new(4, 5), 0).is_err());
}

#[test]
fn report_json_has_exactly_the_documented_fields() {
    let mut r = rng(3);
    let pairs: Vec<(Mask, Mask, u8)> = (0..8)
        .map(|i| (random_mask(&mut r, 8, 8), random_mask(&mut r, 8, 8), i % 4))
        .collect();
    let report = report_of(&pairs);
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut want = [
        "pr50",
        "pr60",
        "pr70",
        "pr80",
        "pr90",
        "oiou",
        "miou",
        "per_category",
    ];
    want.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, want);
    let back: Report = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
    assert!(report.to_table().contains("mIoU"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn order_and_partition_do_not_change_the_report(seed in any::<u64>(), split in 0usize..20) {
        let mut r = rng(seed);
        let mut pairs: Vec<(Mask, Mask, u8)> = (0..20)
            .map(|_| (random_mask(&mut r, 6, 6), random_mask(&mut r, 6, 6), r.random_range(0..4)))
            .collect();
        let base = report_of(&pairs);
        pairs.shuffle(&mut r);
        prop_assert_eq!(&report_of(&pairs), &base);

        let (mut a, mut b) = (EvalAccumulator::new(), EvalAccumulator::new());
        for (i, (p, g, c)) in pairs.iter().enumerate() {
            if i < split { a.add(p, g, *c).unwrap(); } else { b.add(p, g, *c).unwrap(); }
        }
        b.merge(&a);
        prop_assert_eq!(&b.finalize().unwrap(), &base);
    }

    #[test]
    fn precision_is_bounded_and_non_increasing(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pairs: Vec<(Mask, Mask, u8)> = (0..12)
            .map(|_| (random_mask(&mut r, 5, 5), random_mask(&mut r, 5, 5), 0))
            .collect();
        let report = report_of(&pairs);
        let pr = report.precisions();
        for w in pr.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for v in pr.into_iter().chain([report.oiou, report.miou]) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
