//! Training targets from labeled anchors, and the objectness and regression
//! losses evaluated against them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{centerness, ltrb_target, signed_ltrb, AnchorBox, GtBox, Ltrb};
use crate::labeler::{AnchorLabel, Role};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRecord {
    pub image_id: u64,
    pub anchor_index: usize,
    /// Positive or negative; ignored anchors produce no record.
    pub role: Role,
    pub regression_target: Option<Ltrb>,
    pub objectness_target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub anchor_index: usize,
    pub objectness_logit: f64,
    pub regression_pred: Option<Ltrb>,
}

/// One record per positive and negative anchor, in anchor order.
///
/// A positive whose anchor centre falls outside its matched box gets
/// objectness 0 and the signed side distances as its regression target.
pub fn assign_targets(
    image_id: u64,
    labels: &[AnchorLabel],
    anchors: &[AnchorBox],
    gts: &[GtBox],
) -> Result<Vec<TargetRecord>> {
    if labels.len() != anchors.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} anchors",
            labels.len(),
            anchors.len()
        )));
    }
    let mut out = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if l.anchor_index != i {
            return Err(Error::Consistency(format!(
                "label {i} refers to anchor {}",
                l.anchor_index
            )));
        }
        match l.role {
            Role::Ignored => {}
            Role::Negative => out.push(TargetRecord {
                image_id,
                anchor_index: i,
                role: Role::Negative,
                regression_target: None,
                objectness_target: 0.0,
            }),
            Role::Positive => {
                let gt = l.matched_gt.ok_or_else(|| {
                    Error::Consistency(format!("positive anchor {i} has no matched box"))
                })?;
                let gt = gts.get(gt).ok_or_else(|| {
                    Error::Consistency(format!(
                        "anchor {i} matched box {gt} but the image has {}",
                        gts.len()
                    ))
                })?;
                let c = anchors[i].center;
                let reg = ltrb_target(c, &gt.bbox).unwrap_or_else(|| signed_ltrb(c, &gt.bbox));
                out.push(TargetRecord {
                    image_id,
                    anchor_index: i,
                    role: Role::Positive,
                    regression_target: Some(reg),
                    objectness_target: centerness(c, &gt.bbox),
                });
            }
        }
    }
    Ok(out)
}

/// Keep at most `cap` records per role and image, lowest anchor indices
/// first.
pub fn cap_per_role(records: Vec<TargetRecord>, cap: usize) -> Vec<TargetRecord> {
    let mut seen: HashMap<(u64, Role), usize> = HashMap::new();
    records
        .into_iter()
        .filter(|r| {
            let n = seen.entry((r.image_id, r.role)).or_default();
            *n += 1;
            *n <= cap
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub regression: f64,
    pub objectness: f64,
}

struct PredIndex<'a> {
    map: HashMap<(u64, usize), &'a PredictionRecord>,
}

impl<'a> PredIndex<'a> {
    fn new(preds: &'a [PredictionRecord]) -> Self {
        let mut map = HashMap::with_capacity(preds.len());
        for p in preds {
            map.entry((p.image_id, p.anchor_index)).or_insert(p);
        }
        PredIndex { map }
    }

    fn get(&self, t: &TargetRecord) -> Result<&'a PredictionRecord> {
        let p = self.map.get(&(t.image_id, t.anchor_index)).copied().ok_or(Error::Coverage {
            image_id: t.image_id,
            anchor_index: t.anchor_index,
        })?;
        if !p.objectness_logit.is_finite() {
            return Err(Error::Format(format!(
                "non-finite logit for image {} anchor {}",
                t.image_id, t.anchor_index
            )));
        }
        Ok(p)
    }
}

/// Mean of `|sigmoid(logit) - o*|` over every target.
pub fn objectness_loss(preds: &[PredictionRecord], targets: &[TargetRecord]) -> Result<f64> {
    let index = PredIndex::new(preds);
    objectness_term(&index, targets.iter())
}

fn objectness_term<'t>(
    index: &PredIndex<'_>,
    targets: impl Iterator<Item = &'t TargetRecord>,
) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for t in targets {
        let p = index.get(t)?;
        sum += (sigmoid(p.objectness_logit) - t.objectness_target).abs();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Objectness loss and its gradient for aligned logit and target slices.
/// Where the prediction hits the target exactly the subgradient 0 is used.
pub fn objectness_loss_grad(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let s = sigmoid(z);
            let d = s - t;
            sum += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            sign * s * (1.0 - s) * inv
        })
        .collect();
    (sum * inv, grad)
}

fn mae(p: &Ltrb, t: &Ltrb) -> f64 {
    ((p.l - t.l).abs() + (p.r - t.r).abs() + (p.t - t.t).abs() + (p.b - t.b).abs()) / 4.0
}

/// Mean over positives of the per-anchor mean absolute side error.
pub fn regression_loss(preds: &[PredictionRecord], targets: &[TargetRecord]) -> Result<f64> {
    if let Some(t) = targets.iter().find(|t| t.role != Role::Positive) {
        return Err(Error::Role(format!(
            "regression loss takes positives only; anchor {} of image {} is {}",
            t.anchor_index, t.image_id, t.role
        )));
    }
    let index = PredIndex::new(preds);
    regression_term(&index, targets.iter())
}

fn regression_term<'t>(
    index: &PredIndex<'_>,
    positives: impl Iterator<Item = &'t TargetRecord>,
) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for t in positives {
        let p = index.get(t)?;
        let target = t.regression_target.ok_or_else(|| {
            Error::Consistency(format!("positive anchor {} lacks a regression target", t.anchor_index))
        })?;
        let pred = p.regression_pred.ok_or(Error::Coverage {
            image_id: t.image_id,
            anchor_index: t.anchor_index,
        })?;
        sum += mae(&pred, &target);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Regression over positives plus objectness over positives and negatives.
pub fn bowl_loss(preds: &[PredictionRecord], targets: &[TargetRecord]) -> Result<LossBreakdown> {
    let index = PredIndex::new(preds);
    let regression = regression_term(&index, targets.iter().filter(|t| t.role == Role::Positive))?;
    let objectness = objectness_term(&index, targets.iter())?;
    Ok(LossBreakdown {
        total: regression + objectness,
        regression,
        objectness,
    })
}

/// Positive-only objective: negatives in `targets` are skipped.
pub fn oln_loss(preds: &[PredictionRecord], targets: &[TargetRecord]) -> Result<LossBreakdown> {
    let index = PredIndex::new(preds);
    let mut reg_sum = 0.0f64;
    let mut obj_sum = 0.0f64;
    let mut n = 0usize;
    for t in targets.iter().filter(|t| t.role == Role::Positive) {
        let p = index.get(t)?;
        obj_sum += (sigmoid(p.objectness_logit) - t.objectness_target).abs();
        let target = t.regression_target.ok_or_else(|| {
            Error::Consistency(format!("positive anchor {} lacks a regression target", t.anchor_index))
        })?;
        let pred = p.regression_pred.ok_or(Error::Coverage {
            image_id: t.image_id,
            anchor_index: t.anchor_index,
        })?;
        reg_sum += mae(&pred, &target);
        n += 1;
    }
    let (regression, objectness) = if n == 0 {
        (0.0, 0.0)
    } else {
        (reg_sum / n as f64, obj_sum / n as f64)
    };
    Ok(LossBreakdown {
        total: regression + objectness,
        regression,
        objectness,
    })
}

/// Binary cross-entropy on logits against 0/1 labels, averaged.
pub fn classification_loss(logits: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    // log(1 + e^-|z|) + max(z, 0) - z*y
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (-z.abs()).exp().ln_1p() + z.max(0.0) - if y { z } else { 0.0 })
        .sum();
    sum / logits.len() as f64
}

/// Tab-separated, one record per line:
/// `image_id anchor_index role objectness [l r t b]`.
pub fn format_targets(records: &[TargetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(out, "{}\t{}\t{}\t{:.8e}", r.image_id, r.anchor_index, r.role, r.objectness_target).unwrap();
        if let Some(d) = r.regression_target {
            write!(out, "\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}", d.l, d.r, d.t, d.b).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_targets(records: &[TargetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_targets(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_targets(text: &str) -> Result<Vec<TargetRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

fn parse_line(line: &str) -> std::result::Result<TargetRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 4 && f.len() != 8 {
        return Err(format!("expected 4 or 8 fields, found {}", f.len()));
    }
    let num = |s: &str, what: &str| -> std::result::Result<f64, String> {
        let v: f64 = s.parse().map_err(|_| format!("bad {what} {s:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite {what}"))
        }
    };
    let image_id = f[0].parse().map_err(|_| format!("bad image id {:?}", f[0]))?;
    let anchor_index = f[1].parse().map_err(|_| format!("bad anchor index {:?}", f[1]))?;
    let role: Role = f[2].parse()?;
    let objectness_target = num(f[3], "objectness")?;
    if !(0.0..=1.0).contains(&objectness_target) {
        return Err(format!("objectness {objectness_target} outside [0, 1]"));
    }
    let regression_target = if f.len() == 8 {
        Some(Ltrb {
            l: num(f[4], "l")?,
            r: num(f[5], "r")?,
            t: num(f[6], "t")?,
            b: num(f[7], "b")?,
        })
    } else {
        None
    };
    match (role, regression_target.is_some()) {
        (Role::Ignored, _) => return Err("ignored anchors carry no target".into()),
        (Role::Positive, false) => return Err("positive without regression target".into()),
        (Role::Negative, true) => return Err("negative with regression target".into()),
        (Role::Negative, false) if objectness_target != 0.0 => {
            return Err("negative with nonzero objectness".into())
        }
        _ => {}
    }
    Ok(TargetRecord {
        image_id,
        anchor_index,
        role,
        regression_target,
        objectness_target,
    })
}

pub fn read_targets(path: impl AsRef<Path>) -> Result<Vec<TargetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_targets(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Point};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn anchor_at(cx: f64, cy: f64) -> AnchorBox {
        AnchorBox {
            bbox: BBox::new(cx - 4.0, cy - 4.0, 8.0, 8.0),
            level: 0,
            center: Point { x: cx, y: cy },
        }
    }

    fn label(i: usize, role: Role, gt: Option<usize>) -> AnchorLabel {
        AnchorLabel { anchor_index: i, role, matched_gt: gt, similarity: None }
    }

    fn pred(i: usize, logit: f64, reg: Option<[f64; 4]>) -> PredictionRecord {
        PredictionRecord {
            image_id: 1,
            anchor_index: i,
            objectness_logit: logit,
            regression_pred: reg.map(|[l, r, t, b]| Ltrb { l, r, t, b }),
        }
    }

    fn pos(i: usize, o: f64, reg: [f64; 4]) -> TargetRecord {
        let [l, r, t, b] = reg;
        TargetRecord { image_id: 1, anchor_index: i, role: Role::Positive, regression_target: Some(Ltrb { l, r, t, b }), objectness_target: o }
    }

    fn neg(i: usize) -> TargetRecord {
        TargetRecord { image_id: 1, anchor_index: i, role: Role::Negative, regression_target: None, objectness_target: 0.0 }
    }

    #[test]
    fn target_examples() {
        let gt = GtBox { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), class_id: 0, is_base: true };
        let anchors = [anchor_at(5.0, 5.0), anchor_at(40.0, 40.0), anchor_at(20.0, 20.0)];
        let labels = [label(0, Role::Positive, Some(0)), label(1, Role::Negative, None), label(2, Role::Ignored, None)];
        let t = assign_targets(7, &labels, &anchors, &[gt]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].objectness_target, 1.0);
        assert_eq!(t[0].regression_target.unwrap().as_array(), [5.0; 4]);
        assert_eq!(t[1].objectness_target, 0.0);
        assert!(t[1].regression_target.is_none());
        assert_eq!(t[1].image_id, 7);

        let ignored = [label(0, Role::Ignored, None)];
        assert!(assign_targets(7, &ignored, &anchors[..1], &[gt]).unwrap().is_empty());

        let broken = [label(0, Role::Positive, None)];
        assert!(matches!(assign_targets(7, &broken, &anchors[..1], &[gt]), Err(Error::Consistency(_))));
    }

    #[test]
    fn positive_with_centre_outside_its_box() {
        let gt = GtBox { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), class_id: 0, is_base: true };
        let t = assign_targets(1, &[label(0, Role::Positive, Some(0))], &[anchor_at(12.0, 5.0)], &[gt]).unwrap();
        assert_eq!(t[0].objectness_target, 0.0);
        assert_eq!(t[0].regression_target.unwrap().as_array(), [12.0, -2.0, 5.0, 5.0]);
    }

    #[test]
    fn objectness_examples() {
        let targets = [pos(0, 1.0, [5.0; 4]), neg(1)];
        let preds = [pred(0, 3f64.ln(), Some([5.0; 4])), pred(1, 0.0, None)];
        assert!((objectness_loss(&preds, &targets).unwrap() - 0.375).abs() < 1e-15);
        assert_eq!(objectness_loss(&preds[1..], &targets[1..]).unwrap(), 0.5);
        assert_eq!(objectness_loss(&[pred(0, 0.0, None)], &[pos(0, 0.5, [1.0; 4])]).unwrap(), 0.0);
        assert!(matches!(
            objectness_loss(&preds[..1], &targets),
            Err(Error::Coverage { image_id: 1, anchor_index: 1 })
        ));
        assert_eq!(objectness_loss(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn regression_examples() {
        let t = [pos(0, 1.0, [5.0; 4])];
        assert_eq!(regression_loss(&[pred(0, 0.0, Some([5.0; 4]))], &t).unwrap(), 0.0);
        assert_eq!(regression_loss(&[pred(0, 0.0, Some([4.0, 6.0, 5.0, 5.0]))], &t).unwrap(), 0.5);
        assert!(matches!(regression_loss(&[pred(1, 0.0, None)], &[neg(1)]), Err(Error::Role(_))));
    }

    #[test]
    fn bowl_examples() {
        // no positives: objectness over negatives only, regression 0
        let b = bowl_loss(&[pred(0, 0.0, None), pred(1, 0.0, None)], &[neg(0), neg(1)]).unwrap();
        assert_eq!(b, LossBreakdown { total: 0.5, regression: 0.0, objectness: 0.5 });
        // mixed: regression 0.5 over one positive; objectness (0.25 + 0.5) / 2
        let targets = [pos(0, 1.0, [5.0; 4]), neg(1)];
        let preds = [pred(0, 3f64.ln(), Some([4.0, 6.0, 5.0, 5.0])), pred(1, 0.0, None)];
        let b = bowl_loss(&preds, &targets).unwrap();
        assert_eq!(b.regression, 0.5);
        assert!((b.objectness - 0.375).abs() < 1e-15);
        assert!((b.total - 0.875).abs() < 1e-15);
        let o = oln_loss(&preds, &targets).unwrap();
        assert!((o.objectness - 0.25).abs() < 1e-15);
    }

    fn random_fixture(seed: u64, negatives: bool) -> (Vec<PredictionRecord>, Vec<TargetRecord>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..30);
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            let is_pos = !negatives || rng.gen_bool(0.5);
            let reg = [(); 4].map(|_| rng.gen_range(0.0..50.0));
            preds.push(pred(i, rng.gen_range(-6.0..6.0), Some([(); 4].map(|_| rng.gen_range(0.0..50.0)))));
            targets.push(if is_pos { pos(i, rng.gen_range(0.0..1.0), reg) } else { neg(i) });
        }
        (preds, targets)
    }

    proptest! {
        #[test]
        fn bowl_without_negatives_is_oln(seed in any::<u64>()) {
            let (p, t) = random_fixture(seed, false);
            let a = bowl_loss(&p, &t).unwrap();
            let b = oln_loss(&p, &t).unwrap();
            prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
            prop_assert_eq!(a.objectness.to_bits(), b.objectness.to_bits());
            prop_assert_eq!(a.regression.to_bits(), b.regression.to_bits());
        }

        #[test]
        fn duplicating_records_keeps_losses(seed in any::<u64>()) {
            let (p, t) = random_fixture(seed, true);
            let doubled: Vec<TargetRecord> = t.iter().chain(&t).copied().collect();
            let a = bowl_loss(&p, &t).unwrap();
            let b = bowl_loss(&p, &doubled).unwrap();
            prop_assert!((a.objectness - b.objectness).abs() < 1e-12);
            prop_assert!((a.regression - b.regression).abs() < 1e-12);
            prop_assert!(a.total >= 0.0);
        }

        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..20);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
            let (_, g) = objectness_loss_grad(&z, &t);
            for i in 0..n {
                // skip points within reach of the kink at sigmoid(z) = t
                prop_assume!((sigmoid(z[i]) - t[i]).abs() > 1e-4);
                let h = 1e-6;
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fd = (objectness_loss_grad(&zp, &t).0 - objectness_loss_grad(&zm, &t).0) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{} vs {}", fd, g[i]);
            }
        }
    }

    #[test]
    fn classification_loss_matches_naive_bce() {
        let z = [-3.0, -0.5, 0.0, 2.0, 8.0];
        let y = [false, true, true, false, true];
        let naive: f64 = z.iter().zip(&y).map(|(&z, &y)| {
            let s = 1.0 / (1.0 + (-z as f64).exp());
            if y { -s.ln() } else { -(1.0 - s).ln() }
        }).sum::<f64>() / 5.0;
        assert!((classification_loss(&z, &y) - naive).abs() < 1e-12);
    }

    #[test]
    fn targets_file_round_trip() {
        assert_eq!(format_targets(&[]), "");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<TargetRecord> = (0..100)
            .map(|i| {
                let mut r = if rng.gen_bool(0.5) {
                    pos(i, rng.gen_range(0.0..1.0), [(); 4].map(|_| rng.gen_range(-10.0..300.0)))
                } else {
                    neg(i)
                };
                r.image_id = rng.gen();
                r
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.tsv");
        write_targets(&recs, &path).unwrap();
        let back = read_targets(&path).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!((a.image_id, a.anchor_index, a.role), (b.image_id, b.anchor_index, b.role));
            assert!((a.objectness_target - b.objectness_target).abs() <= 1e-7 * a.objectness_target.abs().max(1e-30));
            if let (Some(x), Some(y)) = (a.regression_target, b.regression_target) {
                for (u, v) in x.as_array().iter().zip(y.as_array()) {
                    assert!((u - v).abs() <= 1e-7 * u.abs());
                }
            }
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "1\t0\tnegative\t0.0\n1\t1\tpositve\t1.0\t1\t1\t1\t1\n";
        match parse_targets(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("positve"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_targets("1\t0\tpositive\t1.0\n").is_err());
    }

    #[test]
    fn role_cap() {
        let recs = vec![neg(0), neg(1), pos(2, 1.0, [1.0; 4]), neg(3)];
        let capped = cap_per_role(recs, 1);
        assert_eq!(capped.iter().map(|r| r.anchor_index).collect::<Vec<_>>(), vec![0, 2]);
    }
}
