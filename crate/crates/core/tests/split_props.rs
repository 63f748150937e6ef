use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, RngCore};
use sos_core::split::{partition_dataset, split_loss_image, RoiLoss, RoiLossBreakdown, SplitLossRecord};
use sos_testkit::rng;

fn roi(r: &mut impl RngCore, fg: bool) -> RoiLoss {
    RoiLoss {
        is_foreground: fg,
        rpn_cls: r.random_range(0.0..2.0),
        rpn_reg: r.random_range(0.0..2.0),
        roi_cls: r.random_range(0.0..2.0),
        roi_reg: r.random_range(0.0..2.0),
    }
}

fn breakdowns(seed: u64, n_images: usize) -> Vec<RoiLossBreakdown> {
    let mut r = rng(seed);
    (0..n_images)
        .map(|i| {
            let n = r.random_range(0..12);
            let rois = (0..n)
                .map(|_| {
                    let fg = r.random_bool(0.5);
                    roi(&mut r, fg)
                })
                .collect();
            RoiLossBreakdown {
                image_id: format!("im{i:03}"),
                rois,
            }
        })
        .collect()
}

fn records(bs: &[RoiLossBreakdown]) -> Vec<SplitLossRecord> {
    bs.iter().map(|b| split_loss_image(b).unwrap()).collect()
}

proptest! {
    #[test]
    fn background_rois_do_not_matter(seed in any::<u64>(), extra in 1usize..10) {
        let mut r = rng(seed ^ 0xb6);
        for b in breakdowns(seed, 5) {
            let before = split_loss_image(&b).unwrap();
            let mut more = b.clone();
            for _ in 0..extra {
                let at = r.random_range(0..=more.rois.len());
                let bg = roi(&mut r, false);
                more.rois.insert(at, bg);
            }
            let after = split_loss_image(&more).unwrap();
            prop_assert_eq!(before.loss.to_bits(), after.loss.to_bits());
            prop_assert_eq!(before.n_pos, after.n_pos);
        }
    }

    #[test]
    fn order_statistic(seed in any::<u64>(), n in 1usize..40, frac in 0.0f64..=1.0) {
        let rs = records(&breakdowns(seed, n));
        let k = (frac * n as f64).round() as usize;
        let (lab, unl) = partition_dataset(&rs, k).unwrap();
        prop_assert_eq!(lab.len(), k);
        prop_assert_eq!(lab.len() + unl.len(), n);
        let loss = |id: &String| rs.iter().find(|r| &r.image_id == id).unwrap().loss;
        let max_l = lab.iter().map(loss).fold(f64::NEG_INFINITY, f64::max);
        let min_u = unl.iter().map(loss).fold(f64::INFINITY, f64::min);
        prop_assert!(max_l <= min_u);
    }

    #[test]
    fn positive_scaling_keeps_selection(seed in any::<u64>(), n in 1usize..40, c in 0.01f64..100.0) {
        let bs = breakdowns(seed, n);
        let k = n / 2;
        let scaled: Vec<RoiLossBreakdown> = bs.iter().map(|b| RoiLossBreakdown {
            image_id: b.image_id.clone(),
            rois: b.rois.iter().map(|r| RoiLoss {
                rpn_cls: c * r.rpn_cls, rpn_reg: c * r.rpn_reg, roi_cls: c * r.roi_cls, roi_reg: c * r.roi_reg, ..*r
            }).collect(),
        }).collect();
        let a: BTreeSet<String> = partition_dataset(&records(&bs), k).unwrap().0.into_iter().collect();
        let b: BTreeSet<String> = partition_dataset(&records(&scaled), k).unwrap().0.into_iter().collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn partition_ignores_input_order(seed in any::<u64>(), n in 1usize..30) {
        let mut rs = records(&breakdowns(seed, n));
        let k = n / 3;
        let first = partition_dataset(&rs, k).unwrap();
        rs.reverse();
        prop_assert_eq!(partition_dataset(&rs, k).unwrap(), first);
    }
}
