//! Linear objectness probe over pooled anchor embeddings, and the A/B
//! comparison of training with and without exemplar-mined negatives.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codebook::ExemplarSet;
use crate::error::{Error, Result};
use crate::evalkit::{self, Detection, GroundTruth};
use crate::geometry::{generate_anchors, AnchorConfig, GtBox};
use crate::labeler::{label_pooled, LabelConfig, PooledAnchors, Role};
use crate::supervision::{assign_targets, cap_per_role, objectness_loss_grad, sigmoid, TargetRecord};
use crate::synthetic::SyntheticDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    PositivesOnly,
    WithNegatives,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::PositivesOnly => "positives_only",
            Condition::WithNegatives => "with_negatives",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positives_only" => Ok(Condition::PositivesOnly),
            "with_negatives" => Ok(Condition::WithNegatives),
            other => Err(format!(
                "unknown condition {other:?} (expected positives_only or with_negatives)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub condition: Condition,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 20.0,
            epochs: 300,
            seed: 0,
            condition: Condition::WithNegatives,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, x: &[f32]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .map(|(&w, &v)| w * v as f64)
            .sum::<f64>()
            + self.bias
    }
}

/// Loss and gradient `(loss, d/dw, d/db)` of the objectness loss of a probe
/// on row-major `features` against `targets`.
pub fn probe_loss_grad(model: &ProbeModel, features: &[f32], targets: &[f64]) -> (f64, Vec<f64>, f64) {
    let d = model.dim();
    let logits: Vec<f64> = features.chunks_exact(d).map(|x| model.logit(x)).collect();
    let (loss, g) = objectness_loss_grad(&logits, targets);
    let mut gw = vec![0.0f64; d];
    let mut gb = 0.0f64;
    for (x, &gi) in features.chunks_exact(d).zip(&g) {
        if gi == 0.0 {
            continue;
        }
        for (w, &v) in gw.iter_mut().zip(x) {
            *w += gi * v as f64;
        }
        gb += gi;
    }
    (loss, gw, gb)
}

/// Full-batch gradient descent on the objectness loss from a seeded start.
/// `features` holds one row per target record. Under
/// [`Condition::PositivesOnly`] negative records are dropped first.
pub fn train_probe(
    features: &[f32],
    dim: usize,
    targets: &[TargetRecord],
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    if dim == 0 || features.len() != dim * targets.len() {
        return Err(Error::Dimension {
            expected: dim * targets.len(),
            found: features.len(),
        });
    }
    let keep: Vec<usize> = (0..targets.len())
        .filter(|&i| config.condition == Condition::WithNegatives || targets[i].role == Role::Positive)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset("no training records".into()));
    }
    let mut x = Vec::with_capacity(keep.len() * dim);
    let mut t = Vec::with_capacity(keep.len());
    for &i in &keep {
        x.extend_from_slice(&features[i * dim..(i + 1) * dim]);
        t.push(targets[i].objectness_target);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut model = ProbeModel {
        weights: (0..dim).map(|_| init.sample(&mut rng)).collect(),
        bias: 0.0,
    };
    for _ in 0..config.epochs {
        let (_, gw, gb) = probe_loss_grad(&model, &x, &t);
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.learning_rate * g;
        }
        model.bias -= config.learning_rate * gb;
    }
    Ok(model)
}

/// `sigmoid(w . x + b)` per row.
pub fn score_anchors(model: &ProbeModel, features: &[f32]) -> Result<Vec<f64>> {
    let d = model.dim();
    if d == 0 || features.len() % d != 0 {
        return Err(Error::Dimension {
            expected: d,
            found: features.len(),
        });
    }
    Ok(features.chunks_exact(d).map(|x| sigmoid(model.logit(x))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbConfig {
    pub probe: ProbeConfig,
    pub label: LabelConfig,
    pub anchors: AnchorConfig,
    pub budget: usize,
    pub per_role_cap: Option<usize>,
}

impl AbConfig {
    pub fn for_dataset(ds: &SyntheticDataset) -> Self {
        AbConfig {
            probe: ProbeConfig::default(),
            label: LabelConfig::default(),
            anchors: ds.config.anchors.clone(),
            budget: evalkit::DEFAULT_BUDGET,
            per_role_cap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub ar_novel: f64,
    pub ar_all: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbReport {
    pub seed: u64,
    pub with_negatives: ConditionResult,
    pub positives_only: ConditionResult,
    pub positives: usize,
    pub negatives: usize,
}

impl AbReport {
    pub fn improvement(&self) -> f64 {
        self.with_negatives.ar_novel - self.positives_only.ar_novel
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("condition\tar_novel\tar_all\tseed\n");
        for r in [&self.positives_only, &self.with_negatives] {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\n",
                r.condition, r.ar_novel, r.ar_all, self.seed
            ));
        }
        out
    }
}

/// Pooled features and targets for the training images.
pub struct TrainingData {
    pub features: Vec<f32>,
    pub dim: usize,
    pub targets: Vec<TargetRecord>,
}

fn base_only(gts: &[GtBox]) -> Vec<GtBox> {
    gts.iter().filter(|g| g.is_base).copied().collect()
}

pub fn training_data(
    ds: &SyntheticDataset,
    exemplars: &ExemplarSet,
    config: &AbConfig,
) -> Result<TrainingData> {
    let gt = ds.annotations.gt_by_image();
    let dim = exemplars.dim();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for grid in &ds.grids[..ds.config.train_images] {
        let im = ds.annotations.image(grid.image_id).ok_or_else(|| {
            Error::Consistency(format!("grid {} has no image entry", grid.image_id))
        })?;
        let anchors = generate_anchors(im.width, im.height, &config.anchors);
        let pooled = PooledAnchors::compute(&anchors, grid)?;
        let gts = base_only(gt.get(&grid.image_id).map_or(&[][..], |v| v));
        let labels = label_pooled(&anchors, &pooled, exemplars, &gts, &config.label)?;
        let mut recs = assign_targets(grid.image_id, &labels.labels, &anchors, &gts)?;
        if let Some(cap) = config.per_role_cap {
            recs = cap_per_role(recs, cap);
        }
        for r in recs {
            if let Some(x) = pooled.get(r.anchor_index) {
                features.extend_from_slice(x);
                targets.push(r);
            }
        }
    }
    Ok(TrainingData {
        features,
        dim,
        targets,
    })
}

/// Every pooled anchor of the held-out images, clipped and scored.
pub fn detect(ds: &SyntheticDataset, model: &ProbeModel, anchors: &AnchorConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for grid in &ds.grids[ds.config.train_images..] {
        let im = ds.annotations.image(grid.image_id).ok_or_else(|| {
            Error::Consistency(format!("grid {} has no image entry", grid.image_id))
        })?;
        let boxes = generate_anchors(im.width, im.height, anchors);
        let pooled = PooledAnchors::compute(&boxes, grid)?;
        let scores = score_anchors(model, &pooled.matrix)?;
        for (a, row) in boxes.iter().zip(&pooled.rows) {
            let (Some(row), Some(b)) = (row, a.bbox.clip(im.width as f64, im.height as f64)) else {
                continue;
            };
            out.push(Detection {
                image_id: grid.image_id,
                bbox: b,
                score: scores[*row],
            });
        }
    }
    Ok(out)
}

fn held_out_gt(ds: &SyntheticDataset) -> Vec<GroundTruth> {
    let eval: Vec<u64> = ds.eval_ids().collect();
    ds.annotations
        .ground_truth()
        .into_iter()
        .filter(|g| eval.contains(&g.image_id))
        .collect()
}

fn run_condition(
    ds: &SyntheticDataset,
    data: &TrainingData,
    config: &AbConfig,
    condition: Condition,
    gts: &[GroundTruth],
) -> Result<ConditionResult> {
    let probe = ProbeConfig {
        condition,
        ..config.probe.clone()
    };
    let model = train_probe(&data.features, data.dim, &data.targets, &probe)?;
    let dets = detect(ds, &model, &config.anchors)?;
    let (base, novel): (Vec<GroundTruth>, Vec<GroundTruth>) = gts.iter().partition(|g| g.is_base);
    Ok(ConditionResult {
        condition,
        ar_novel: evalkit::ar_novel(&dets, &base, &novel, config.budget).unwrap_or(0.0),
        ar_all: evalkit::average_recall(&dets, gts, config.budget).unwrap_or(0.0),
    })
}

/// Train both conditions on identical data and seed, then compare novel AR
/// on the held-out images.
pub fn ab_experiment(ds: &SyntheticDataset, exemplars: &ExemplarSet, config: &AbConfig) -> Result<AbReport> {
    if exemplars.is_empty() {
        return Err(Error::Config("exemplar set is empty".into()));
    }
    let gts = held_out_gt(ds);
    if !gts.iter().any(|g| !g.is_base) {
        return Err(Error::EmptyDataset("held-out images contain no novel objects".into()));
    }
    let data = training_data(ds, exemplars, config)?;
    let positives = data.targets.iter().filter(|t| t.role == Role::Positive).count();
    let negatives = data.targets.len() - positives;
    let (with, without) = rayon::join(
        || run_condition(ds, &data, config, Condition::WithNegatives, &gts),
        || run_condition(ds, &data, config, Condition::PositivesOnly, &gts),
    );
    Ok(AbReport {
        seed: config.probe.seed,
        with_negatives: with?,
        positives_only: without?,
        positives,
        negatives,
    })
}
