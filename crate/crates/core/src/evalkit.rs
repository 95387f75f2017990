//! Proposal recall: AR@k over IoU 0.50:0.95, novel-class AR with base-linked
//! detections removed from the budget, scale-split AR, and negative-anchor
//! precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::geometry::{iou, BBox};

pub const DEFAULT_BUDGET: usize = 100;
pub const BASE_LINK_IOU: f64 = 0.5;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;
pub const NUM_THRESHOLDS: usize = 10;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: i64,
    pub is_base: bool,
}

/// Detections of one image, best score first, ties in input order, cut to `k`.
fn top_k_by_image(dets: &[Detection], k: usize) -> BTreeMap<u64, Vec<BBox>> {
    let mut by_image: BTreeMap<u64, Vec<(usize, &Detection)>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.image_id).or_default().push((i, d));
    }
    by_image
        .into_iter()
        .map(|(img, mut ds)| {
            ds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
            ds.truncate(k);
            (img, ds.into_iter().map(|(_, d)| d.bbox).collect())
        })
        .collect()
}

fn gts_by_image(gts: &[GroundTruth]) -> BTreeMap<u64, Vec<BBox>> {
    let mut m: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for g in gts {
        m.entry(g.image_id).or_default().push(g.bbox);
    }
    m
}

/// Greedy matching of one image: each GT in turn takes the first (best
/// ranked) unused detection with IoU at or above the threshold.
fn greedy_matches(ranked: &[BBox], gts: &[BBox], threshold: f64) -> usize {
    let mut used = vec![false; ranked.len()];
    let mut matched = 0;
    for g in gts {
        if let Some(j) = (0..ranked.len()).find(|&j| !used[j] && iou(&ranked[j], g) >= threshold) {
            used[j] = true;
            matched += 1;
        }
    }
    matched
}

/// `(matched, total)` GT counts at one threshold with budget `k` per image.
pub fn recall_counts(dets: &[Detection], gts: &[GroundTruth], k: usize, threshold: f64) -> (usize, usize) {
    let ranked = top_k_by_image(dets, k);
    let empty = Vec::new();
    gts_by_image(gts).iter().fold((0, 0), |(m, t), (img, g)| {
        let r = ranked.get(img).unwrap_or(&empty);
        (m + greedy_matches(r, g, threshold), t + g.len())
    })
}

/// Matched fraction of all GT; `None` when there is no GT.
pub fn recall_at(dets: &[Detection], gts: &[GroundTruth], k: usize, threshold: f64) -> Option<f64> {
    assert!(k >= 1, "budget must be at least 1");
    let (m, t) = recall_counts(dets, gts, k, threshold);
    (t > 0).then(|| m as f64 / t as f64)
}

/// Recall at each of the ten thresholds.
pub fn recall_curve(dets: &[Detection], gts: &[GroundTruth], k: usize) -> Option<[f64; NUM_THRESHOLDS]> {
    if gts.is_empty() {
        return None;
    }
    let th = iou_thresholds();
    Some(std::array::from_fn(|i| recall_at(dets, gts, k, th[i]).unwrap()))
}

pub fn average_recall(dets: &[Detection], gts: &[GroundTruth], k: usize) -> Option<f64> {
    recall_curve(dets, gts, k).map(|c| c.iter().sum::<f64>() / NUM_THRESHOLDS as f64)
}

/// Detections left after each base GT (input order) claims the best-scoring
/// unclaimed detection of its image with IoU of at least 0.5.
pub fn remove_base_linked(dets: &[Detection], gts_base: &[GroundTruth]) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut linked = vec![false; dets.len()];
    for g in gts_base {
        if let Some(&j) = order.iter().find(|&&j| {
            !linked[j] && dets[j].image_id == g.image_id && iou(&dets[j].bbox, &g.bbox) >= BASE_LINK_IOU
        }) {
            linked[j] = true;
        }
    }
    dets.iter()
        .zip(&linked)
        .filter(|(_, &l)| !l)
        .map(|(d, _)| *d)
        .collect()
}

/// Average recall on novel GT after base-linked detections leave the budget.
pub fn ar_novel(dets: &[Detection], gts_base: &[GroundTruth], gts_novel: &[GroundTruth], k: usize) -> Option<f64> {
    average_recall(&remove_base_linked(dets, gts_base), gts_novel, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleAr {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

pub fn ar_by_scale(dets: &[Detection], gts: &[GroundTruth], k: usize) -> ScaleAr {
    let part = |keep: &dyn Fn(f64) -> bool| -> Vec<GroundTruth> {
        gts.iter().filter(|g| keep(g.bbox.area())).copied().collect()
    };
    ScaleAr {
        small: average_recall(dets, &part(&|a| a < SMALL_AREA), k),
        medium: average_recall(dets, &part(&|a| (SMALL_AREA..LARGE_AREA).contains(&a)), k),
        large: average_recall(dets, &part(&|a| a >= LARGE_AREA), k),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArReport {
    pub budget: usize,
    pub ar_all: Option<f64>,
    pub ar_novel: Option<f64>,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
    /// Recall over all GT at 0.50, 0.55, ..., 0.95.
    pub per_threshold: Option<[f64; NUM_THRESHOLDS]>,
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], k: usize) -> ArReport {
    let (base, novel): (Vec<GroundTruth>, Vec<GroundTruth>) = gts.iter().partition(|g| g.is_base);
    let scale = ar_by_scale(dets, gts, k);
    ArReport {
        budget: k,
        ar_all: average_recall(dets, gts, k),
        ar_novel: ar_novel(dets, &base, &novel, k),
        ar_small: scale.small,
        ar_medium: scale.medium,
        ar_large: scale.large,
        per_threshold: recall_curve(dets, gts, k),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl ArReport {
    /// Two-column tab-separated table.
    pub fn to_table(&self) -> String {
        let mut out = format!("metric\tvalue\nbudget\t{}\n", self.budget);
        for (name, v) in [
            ("ar_all", self.ar_all),
            ("ar_novel", self.ar_novel),
            ("ar_small", self.ar_small),
            ("ar_medium", self.ar_medium),
            ("ar_large", self.ar_large),
        ] {
            writeln!(out, "{name}\t{}", cell(v)).unwrap();
        }
        for (i, t) in iou_thresholds().iter().enumerate() {
            writeln!(out, "recall@{t:.2}\t{}", cell(self.per_threshold.map(|c| c[i]))).unwrap();
        }
        out
    }
}

/// Share of `negatives` whose IoU with every GT (any class, same image) is
/// below `iou_threshold`. With `anchor_size`, only negatives of exactly that
/// width and height count. `None` when no negative is left.
pub fn negative_precision(
    negatives: &[(u64, BBox)],
    gts: &[GroundTruth],
    iou_threshold: f64,
    anchor_size: Option<(f64, f64)>,
) -> Option<f64> {
    let by_image = gts_by_image(gts);
    let empty = Vec::new();
    let mut total = 0usize;
    let mut clean = 0usize;
    for (img, b) in negatives {
        if let Some((w, h)) = anchor_size {
            if (b.w - w).abs() > 1e-6 || (b.h - h).abs() > 1e-6 {
                continue;
            }
        }
        total += 1;
        let g = by_image.get(img).unwrap_or(&empty);
        clean += g.iter().all(|g| iou(b, g) < iou_threshold) as usize;
    }
    (total > 0).then(|| clean as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn gt(img: u64, x: f64, y: f64, w: f64, h: f64, base: bool) -> GroundTruth {
        GroundTruth { image_id: img, bbox: BBox::new(x, y, w, h), class_id: base as i64, is_base: base }
    }

    fn det(img: u64, x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { image_id: img, bbox: BBox::new(x, y, w, h), score }
    }

    #[test]
    fn recall_examples() {
        let gts = [gt(1, 0.0, 0.0, 10.0, 10.0, true), gt(1, 20.0, 20.0, 10.0, 10.0, true), gt(2, 5.0, 5.0, 8.0, 8.0, false)];
        let perfect: Vec<Detection> = gts.iter().map(|g| Detection { image_id: g.image_id, bbox: g.bbox, score: 1.0 }).collect();
        assert_eq!(recall_at(&perfect, &gts, 100, 0.5), Some(1.0));
        assert_eq!(average_recall(&perfect, &gts, 100), Some(1.0));
        assert_eq!(recall_at(&[], &gts, 100, 0.5), Some(0.0));
        assert_eq!(recall_at(&perfect, &[], 100, 0.5), None);
        assert_eq!(average_recall(&perfect, &[], 100), None);
        // budget 1 per image keeps one of the two image-1 boxes
        assert_eq!(recall_at(&perfect, &gts, 1, 0.5), Some(2.0 / 3.0));
    }

    #[test]
    fn iou_exactly_point_six_counts_three_thresholds() {
        // a 6x10 detection inside a 10x10 GT: IoU = 60/100
        let g = [gt(1, 0.0, 0.0, 10.0, 10.0, true)];
        let d = [det(1, 0.0, 0.0, 6.0, 10.0, 1.0)];
        assert_eq!(iou(&d[0].bbox, &g[0].bbox), 0.6);
        let ar = average_recall(&d, &g, 100).unwrap();
        assert!((ar - 0.3).abs() < 1e-15, "{ar}");
    }

    #[test]
    fn ties_keep_insertion_order_under_budget() {
        let g = [gt(1, 0.0, 0.0, 10.0, 10.0, true)];
        let d = [det(1, 50.0, 50.0, 10.0, 10.0, 0.5), det(1, 0.0, 0.0, 10.0, 10.0, 0.5)];
        assert_eq!(recall_at(&d, &g, 1, 0.5), Some(0.0));
        assert_eq!(recall_at(&d, &g, 2, 0.5), Some(1.0));
    }

    #[test]
    fn novel_examples() {
        let base = [gt(1, 0.0, 0.0, 10.0, 10.0, true)];
        let novel = [gt(1, 40.0, 40.0, 10.0, 10.0, false)];
        let only_base = [det(1, 0.0, 0.0, 10.0, 10.0, 0.9)];
        assert_eq!(ar_novel(&only_base, &base, &novel, 100), Some(0.0));
        let d = [det(1, 0.0, 0.0, 10.0, 10.0, 0.9), det(1, 40.0, 40.0, 10.0, 10.0, 0.1)];
        assert_eq!(ar_novel(&d, &[], &novel, 100), average_recall(&d, &novel, 100));
        // the base-linked detection no longer occupies the single slot
        assert_eq!(average_recall(&d, &novel, 1), Some(0.0));
        assert_eq!(ar_novel(&d, &base, &novel, 1), Some(1.0));
    }

    #[test]
    fn scale_examples() {
        let small = [gt(1, 0.0, 0.0, 10.0, 10.0, true)];
        let d = [det(1, 0.0, 0.0, 10.0, 10.0, 1.0)];
        assert_eq!(ar_by_scale(&d, &small, 100), ScaleAr { small: Some(1.0), medium: None, large: None });
        let large = [gt(1, 0.0, 0.0, 100.0, 100.0, true)];
        let s = ar_by_scale(&d, &large, 100);
        assert_eq!((s.small, s.medium), (None, None));
        assert_eq!(s.large, Some(0.0));
    }

    #[test]
    fn precision_examples() {
        let g = [gt(1, 0.0, 0.0, 10.0, 10.0, false)];
        let far = (1, BBox::new(50.0, 50.0, 10.0, 10.0));
        assert_eq!(negative_precision(&[far, far], &g, 0.1, None), Some(1.0));
        // 10x10 box vs 10x2 strip inside it: IoU 0.2
        let touching = (1, BBox::new(0.0, 0.0, 10.0, 2.0));
        assert!((iou(&touching.1, &g[0].bbox) - 0.2).abs() < 1e-15);
        assert_eq!(negative_precision(&[far, touching], &g, 0.1, None), Some(0.5));
        assert_eq!(negative_precision(&[], &g, 0.1, None), None);
        assert_eq!(negative_precision(&[far, touching], &g, 0.1, Some((10.0, 2.0))), Some(0.0));
        // a GT of another image does not count
        assert_eq!(negative_precision(&[(2, touching.1)], &g, 0.1, None), Some(1.0));
    }

    #[test]
    fn greedy_can_fall_short_of_optimal_matching() {
        // detection A overlaps both GTs; greedy gives A to the first GT and
        // leaves the second one without a partner.
        let gts = [gt(1, 0.0, 0.0, 10.0, 10.0, true), gt(1, 2.0, 0.0, 10.0, 10.0, true)];
        let d = [det(1, 1.0, 0.0, 10.0, 10.0, 0.9), det(1, -2.0, 0.0, 10.0, 10.0, 0.5)];
        assert_eq!(recall_counts(&d, &gts, 100, 0.5), (1, 2));
        assert_eq!(optimal_matches(&[d[0].bbox, d[1].bbox], &[gts[0].bbox, gts[1].bbox], 0.5), 2);
    }

    /// Largest matching by trying every detection (or none) for each GT.
    pub(crate) fn optimal_matches(dets: &[BBox], gts: &[BBox], th: f64) -> usize {
        fn go(gi: usize, dets: &[BBox], gts: &[BBox], used: &mut Vec<bool>, th: f64) -> usize {
            if gi == gts.len() {
                return 0;
            }
            let mut best = go(gi + 1, dets, gts, used, th);
            for j in 0..dets.len() {
                if !used[j] && iou(&dets[j], &gts[gi]) >= th {
                    used[j] = true;
                    best = best.max(1 + go(gi + 1, dets, gts, used, th));
                    used[j] = false;
                }
            }
            best
        }
        go(0, dets, gts, &mut vec![false; dets.len()], th)
    }

    proptest! {
        #[test]
        fn recall_monotone(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<GroundTruth> = (0..6).map(|i| gt(i % 2, rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(4.0..20.0), rng.gen_range(4.0..20.0), true)).collect();
            let dets: Vec<Detection> = (0..12).map(|i| det(i % 2, rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(4.0..20.0), rng.gen_range(4.0..20.0), rng.gen_range(0.0..1.0))).collect();
            let curve = recall_curve(&dets, &gts, 100).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let ar = average_recall(&dets, &gts, 100).unwrap();
            prop_assert!(ar >= curve[9] && ar <= curve[0]);
            for th in iou_thresholds() {
                let mut prev = 0.0;
                for k in 1..8 {
                    let r = recall_at(&dets, &gts, k, th).unwrap();
                    prop_assert!(r >= prev);
                    prev = r;
                }
            }
        }

        #[test]
        fn precision_monotone_in_threshold(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<GroundTruth> = (0..4).map(|_| gt(1, rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), 12.0, 12.0, false)).collect();
            let negs: Vec<(u64, BBox)> = (0..10).map(|_| (1, BBox::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), 12.0, 12.0))).collect();
            let mut prev = 0.0;
            for t in [0.05, 0.1, 0.2, 0.4, 0.8] {
                let p = negative_precision(&negs, &gts, t, None).unwrap();
                prop_assert!(p >= prev);
                prev = p;
            }
        }
    }
}
