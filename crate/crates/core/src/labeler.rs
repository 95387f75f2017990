//! Anchor labeling: IoU-matched positives, exemplar-similarity negatives, and
//! the self-correlation baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codebook::ExemplarSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorBox, BBox, GtBox};
use crate::store::{normalize_in_place, PatchGrid};

pub const DEFAULT_IOU_POS: f64 = 0.3;
pub const DEFAULT_GUARD_IOU: f64 = 0.1;
pub const DEFAULT_OTSU_BINS: usize = 256;
pub const DEFAULT_MASK_OVERLAP: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Positive,
    Negative,
    Ignored,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Positive => "positive",
            Role::Negative => "negative",
            Role::Ignored => "ignored",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Role::Positive),
            "negative" => Ok(Role::Negative),
            "ignored" => Ok(Role::Ignored),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLabel {
    pub anchor_index: usize,
    pub role: Role,
    /// Index into the image's GT list; present exactly for positives.
    pub matched_gt: Option<usize>,
    /// `s_max` of the pooled anchor embedding, when one exists.
    pub similarity: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaPolicy {
    Fixed(f64),
    Otsu { bins: usize },
}

impl Default for GammaPolicy {
    fn default() -> Self {
        GammaPolicy::Otsu {
            bins: DEFAULT_OTSU_BINS,
        }
    }
}

impl GammaPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            // Values at or above 1 are accepted so "no negatives" can be
            // requested explicitly.
            GammaPolicy::Fixed(g) if !(g > -1.0) || !g.is_finite() => Err(Error::Config(
                format!("fixed gamma {g} must be greater than -1"),
            )),
            GammaPolicy::Otsu { bins } if bins < 2 => {
                Err(Error::Config(format!("otsu bins {bins} must be at least 2")))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for GammaPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" || s == "otsu" {
            return Ok(GammaPolicy::default());
        }
        s.parse::<f64>()
            .map(GammaPolicy::Fixed)
            .map_err(|_| format!("gamma must be 'auto' or a number, got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfig {
    pub iou_pos: f64,
    pub gamma: GammaPolicy,
    /// Negatives may not overlap any base GT at or above this IoU.
    pub guard_iou: Option<f64>,
    /// Restrict negative mining to these anchor levels.
    pub levels: Option<Vec<u32>>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            iou_pos: DEFAULT_IOU_POS,
            gamma: GammaPolicy::default(),
            guard_iou: Some(DEFAULT_GUARD_IOU),
            levels: None,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_pos > 0.0 && self.iou_pos < 1.0) {
            return Err(Error::Config(format!(
                "positive IoU threshold {} must lie in (0, 1)",
                self.iou_pos
            )));
        }
        if let Some(g) = self.guard_iou {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("guard IoU {g} must lie in (0, 1]")));
            }
        }
        self.gamma.validate()
    }
}

/// Mean of the unit patch embeddings whose centres fall inside `anchor`
/// (half-open on the right and bottom), re-normalized. `None` when no patch
/// centre is inside or the mean vanishes.
pub fn pool_anchor_embedding(anchor: &BBox, grid: &PatchGrid) -> Option<Vec<f32>> {
    let d = grid.dim as usize;
    let half = grid.patch_size as f64 / 2.0;
    let mut sum = vec![0.0f64; d];
    let mut any = false;
    let mut unit = vec![0.0f32; d];
    for (row, col, v) in grid.patches() {
        let cx = (col * grid.stride) as f64 + half;
        let cy = (row * grid.stride) as f64 + half;
        if cx >= anchor.x && cx < anchor.right() && cy >= anchor.y && cy < anchor.bottom() {
            unit.copy_from_slice(v);
            if normalize_in_place(&mut unit).is_err() {
                continue;
            }
            for (s, &u) in sum.iter_mut().zip(&unit) {
                *s += u as f64;
            }
            any = true;
        }
    }
    if !any {
        return None;
    }
    finish_pool(&sum)
}

fn finish_pool(sum: &[f64]) -> Option<Vec<f32>> {
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    Some(sum.iter().map(|v| (v / norm) as f32).collect())
}

/// Summed-area table over a grid's unit patch embeddings; pools any anchor
/// in O(dim).
pub struct PatchPooler {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    stride: f64,
    half_patch: f64,
    sums: Vec<f64>,
}

impl PatchPooler {
    /// `grid` may be raw; patches are normalized while accumulating.
    pub fn new(grid: &PatchGrid) -> Result<Self> {
        let (gh, gw, d) = (grid.grid_h as usize, grid.grid_w as usize, grid.dim as usize);
        let mut sums = vec![0.0f64; (gh + 1) * (gw + 1) * d];
        let mut unit = vec![0.0f32; d];
        let idx = |r: usize, c: usize| (r * (gw + 1) + c) * d;
        for r in 0..gh {
            for c in 0..gw {
                unit.copy_from_slice(grid.patch(r as u32, c as u32));
                normalize_in_place(&mut unit)?;
                let (o, up, left, diag) = (idx(r + 1, c + 1), idx(r, c + 1), idx(r + 1, c), idx(r, c));
                for k in 0..d {
                    sums[o + k] = unit[k] as f64 + sums[up + k] + sums[left + k] - sums[diag + k];
                }
            }
        }
        Ok(PatchPooler {
            grid_h: gh,
            grid_w: gw,
            dim: d,
            stride: grid.stride as f64,
            half_patch: grid.patch_size as f64 / 2.0,
            sums,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Half-open index range of grid cells whose centre lies in `[lo, hi)`.
    fn cell_range(&self, lo: f64, hi: f64, cells: usize) -> (usize, usize) {
        let first = ((lo - self.half_patch) / self.stride).ceil().max(0.0);
        let end = ((hi - self.half_patch) / self.stride).ceil().max(0.0);
        let first = (first as usize).min(cells);
        let end = (end as usize).min(cells);
        (first, end.max(first))
    }

    /// Number of patch centres inside `anchor`.
    pub fn patch_count(&self, anchor: &BBox) -> usize {
        let (c0, c1) = self.cell_range(anchor.x, anchor.right(), self.grid_w);
        let (r0, r1) = self.cell_range(anchor.y, anchor.bottom(), self.grid_h);
        (c1 - c0) * (r1 - r0)
    }

    pub fn pool_into(&self, anchor: &BBox, out: &mut [f32]) -> bool {
        let (c0, c1) = self.cell_range(anchor.x, anchor.right(), self.grid_w);
        let (r0, r1) = self.cell_range(anchor.y, anchor.bottom(), self.grid_h);
        if c1 == c0 || r1 == r0 {
            return false;
        }
        let d = self.dim;
        let w1 = self.grid_w + 1;
        let at = |r: usize, c: usize| (r * w1 + c) * d;
        let (a, b, c, e) = (at(r1, c1), at(r0, c1), at(r1, c0), at(r0, c0));
        let mut norm2 = 0.0f64;
        let mut tmp = vec![0.0f64; d];
        for k in 0..d {
            let v = self.sums[a + k] - self.sums[b + k] - self.sums[c + k] + self.sums[e + k];
            tmp[k] = v;
            norm2 += v * v;
        }
        let norm = norm2.sqrt();
        if !(norm > 1e-9) {
            return false;
        }
        for (o, v) in out.iter_mut().zip(&tmp) {
            *o = (v / norm) as f32;
        }
        true
    }

    pub fn pool(&self, anchor: &BBox) -> Option<Vec<f32>> {
        let mut out = vec![0.0f32; self.dim];
        self.pool_into(anchor, &mut out).then_some(out)
    }
}

/// Pooled unit embeddings for many anchors: a row-major matrix over the
/// anchors that have one, plus each anchor's row.
pub struct PooledAnchors {
    pub rows: Vec<Option<usize>>,
    pub matrix: Vec<f32>,
    pub dim: usize,
}

impl PooledAnchors {
    pub fn compute(anchors: &[AnchorBox], grid: &PatchGrid) -> Result<Self> {
        let pooler = PatchPooler::new(grid)?;
        let d = pooler.dim();
        let mut rows = Vec::with_capacity(anchors.len());
        let mut matrix = Vec::with_capacity(anchors.len() * d);
        let mut buf = vec![0.0f32; d];
        for a in anchors {
            if pooler.pool_into(&a.bbox, &mut buf) {
                rows.push(Some(matrix.len() / d));
                matrix.extend_from_slice(&buf);
            } else {
                rows.push(None);
            }
        }
        Ok(PooledAnchors {
            rows,
            matrix,
            dim: d,
        })
    }

    pub fn get(&self, anchor_index: usize) -> Option<&[f32]> {
        self.rows[anchor_index].map(|r| &self.matrix[r * self.dim..(r + 1) * self.dim])
    }
}

/// Histogram bin of `v` for `bins` equal-width bins over `[min, max]`.
fn bin_of(v: f64, min: f64, range: f64, bins: usize) -> usize {
    let b = ((v - min) / range * bins as f64).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// Between-class variance up to a positive factor, as an exact fraction
/// `(S0*n1 - S1*n0)^2 / (n0*n1)` over integer bin indices.
#[derive(Debug, Clone, Copy)]
struct Separation {
    num: u128,
    den: u128,
    approx: f64,
}

impl Separation {
    fn new(n0: u64, s0: u64, n1: u64, s1: u64) -> Self {
        if n0 == 0 || n1 == 0 {
            return Separation {
                num: 0,
                den: 1,
                approx: 0.0,
            };
        }
        let diff = s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128;
        let num = diff.unsigned_abs().checked_mul(diff.unsigned_abs()).unwrap_or(u128::MAX);
        let den = n0 as u128 * n1 as u128;
        let m0 = s0 as f64 / n0 as f64;
        let m1 = s1 as f64 / n1 as f64;
        Separation {
            num,
            den,
            approx: n0 as f64 * n1 as f64 * (m0 - m1) * (m0 - m1),
        }
    }

    fn greater_than(&self, other: &Separation) -> bool {
        match (
            self.num.checked_mul(other.den),
            other.num.checked_mul(self.den),
        ) {
            (Some(a), Some(b)) if self.num != u128::MAX && other.num != u128::MAX => a > b,
            _ => self.approx > other.approx,
        }
    }
}

/// Otsu threshold over `bins` equal-width bins spanning `[min, max]` of the
/// values. Returns the bin edge maximizing between-class variance; the lower
/// edge wins ties. Between-class variance is compared exactly.
pub fn otsu_gamma(values: &[f64], bins: usize) -> Result<f64> {
    Ok(otsu_split(values, bins)?.1)
}

/// `(k, edge)`: class 0 is bins `[0, k)`, `edge = min + k * (max - min) / bins`.
pub fn otsu_split(values: &[f64], bins: usize) -> Result<(usize, f64)> {
    if bins < 2 {
        return Err(Error::Config(format!("otsu bins {bins} must be at least 2")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite similarity value".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.len() < 2 || !(max > min) {
        return Err(Error::Degenerate(
            "otsu needs at least two distinct values".into(),
        ));
    }
    let range = max - min;
    let mut hist = vec![0u64; bins];
    for &v in values {
        hist[bin_of(v, min, range, bins)] += 1;
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best_k = 1usize;
    let mut best: Option<Separation> = None;
    for k in 1..bins {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let sep = Separation::new(n0, s0, n - n0, s - s0);
        if best.map_or(true, |b| sep.greater_than(&b)) {
            best = Some(sep);
            best_k = k;
        }
    }
    Ok((best_k, min + best_k as f64 * range / bins as f64))
}

/// For each anchor, the best base-class GT with IoU above `iou_threshold`:
/// `(gt_index, iou)`, lowest index on ties.
pub fn match_positives(
    anchors: &[AnchorBox],
    gts: &[GtBox],
    iou_threshold: f64,
) -> Vec<Option<(usize, f64)>> {
    anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate().filter(|(_, g)| g.is_base) {
                let v = iou(&a.bbox, &g.bbox);
                if v > iou_threshold && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best
        })
        .collect()
}

fn max_base_iou(a: &BBox, gts: &[GtBox]) -> f64 {
    gts.iter()
        .filter(|g| g.is_base)
        .map(|g| iou(a, &g.bbox))
        .fold(0.0, f64::max)
}

/// Resolve the threshold for one image. `None` when Otsu has nothing to split.
pub fn resolve_gamma(policy: GammaPolicy, similarities: &[Option<f32>]) -> Result<Option<f64>> {
    match policy {
        GammaPolicy::Fixed(g) => Ok(Some(g)),
        GammaPolicy::Otsu { bins } => {
            let vals: Vec<f64> = similarities.iter().flatten().map(|&s| s as f64).collect();
            match otsu_gamma(&vals, bins) {
                Ok(g) => Ok(Some(g)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        }
    }
}

/// Combine positive matches and similarities into one role per anchor.
/// Positive wins; otherwise negative iff `s_max > gamma`, the level is
/// allowed, and the guard IoU to every base GT is respected.
pub fn assign_roles(
    anchors: &[AnchorBox],
    gts: &[GtBox],
    positives: &[Option<(usize, f64)>],
    similarities: &[Option<f32>],
    gamma: Option<f64>,
    config: &LabelConfig,
) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let similarity = similarities[i];
            if let Some((gt, _)) = positives[i] {
                return AnchorLabel {
                    anchor_index: i,
                    role: Role::Positive,
                    matched_gt: Some(gt),
                    similarity,
                };
            }
            let level_ok = config
                .levels
                .as_ref()
                .map_or(true, |ls| ls.contains(&a.level));
            let above = match (similarity, gamma) {
                (Some(s), Some(g)) => s as f64 > g,
                _ => false,
            };
            let guarded = config
                .guard_iou
                .map_or(true, |t| max_base_iou(&a.bbox, gts) < t);
            let role = if level_ok && above && guarded {
                Role::Negative
            } else {
                Role::Ignored
            };
            AnchorLabel {
                anchor_index: i,
                role,
                matched_gt: None,
                similarity,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ImageLabels {
    pub labels: Vec<AnchorLabel>,
    pub gamma: Option<f64>,
}

impl ImageLabels {
    pub fn count(&self, role: Role) -> usize {
        self.labels.iter().filter(|l| l.role == role).count()
    }
}

/// Label every anchor of one image against the exemplar set.
pub fn label_image(
    anchors: &[AnchorBox],
    grid: &PatchGrid,
    exemplars: &ExemplarSet,
    gts: &[GtBox],
    config: &LabelConfig,
) -> Result<ImageLabels> {
    let pooled = PooledAnchors::compute(anchors, grid)?;
    label_pooled(anchors, &pooled, exemplars, gts, config)
}

/// As [`label_image`] with embeddings already pooled.
pub fn label_pooled(
    anchors: &[AnchorBox],
    pooled: &PooledAnchors,
    exemplars: &ExemplarSet,
    gts: &[GtBox],
    config: &LabelConfig,
) -> Result<ImageLabels> {
    config.validate()?;
    if exemplars.is_empty() {
        return Err(Error::Config("exemplar set is empty".into()));
    }
    if pooled.dim != exemplars.dim() {
        return Err(Error::Dimension {
            expected: exemplars.dim(),
            found: pooled.dim,
        });
    }
    let scores = exemplars.s_max_batch(&pooled.matrix)?;
    let similarities: Vec<Option<f32>> = pooled.rows.iter().map(|r| r.map(|r| scores[r])).collect();
    let positives = match_positives(anchors, gts, config.iou_pos);
    let gamma = resolve_gamma(config.gamma, &similarities)?;
    let labels = assign_roles(anchors, gts, &positives, &similarities, gamma, config);
    Ok(ImageLabels { labels, gamma })
}

/// Self-correlation baseline: each patch's mean cosine similarity to every
/// other patch of the same image.
pub fn mean_self_similarity(grid: &PatchGrid) -> Result<Vec<f64>> {
    let m = grid.num_patches();
    if m < 2 {
        return Err(Error::Degenerate(
            "self-correlation needs at least two patches".into(),
        ));
    }
    let unit = grid.normalized()?;
    let d = grid.dim as usize;
    let mut total = vec![0.0f64; d];
    for (_, _, v) in unit.patches() {
        for (t, &x) in total.iter_mut().zip(v) {
            *t += x as f64;
        }
    }
    Ok(unit
        .patches()
        .map(|(_, _, v)| {
            let dot_total: f64 = v.iter().zip(&total).map(|(&a, &b)| a as f64 * b).sum();
            let self_dot: f64 = v.iter().map(|&a| a as f64 * a as f64).sum();
            (dot_total - self_dot) / (m - 1) as f64
        })
        .collect())
}

/// Background mask from self-correlation: the `share` fraction of patches
/// with the highest mean similarity to the rest of the image (ties by
/// row-major index) are background.
pub fn self_correlation_labels(grid: &PatchGrid, share: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&share) {
        return Err(Error::Config(format!("quantile {share} must lie in [0, 1]")));
    }
    let means = mean_self_similarity(grid)?;
    let m = means.len();
    let take = ((share * m as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    let mut mask = vec![false; m];
    for &i in order.iter().take(take.min(m)) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Pixel coverage of a patch mask, queryable for any rectangle.
pub struct MaskCoverage {
    width: usize,
    height: usize,
    /// `(height + 1) x (width + 1)` prefix sums of covered pixels.
    prefix: Vec<f64>,
}

impl MaskCoverage {
    /// Covered pixels are the union of the rectangles of masked patches.
    pub fn new(mask: &[bool], grid: &PatchGrid) -> Result<Self> {
        if mask.len() != grid.num_patches() {
            return Err(Error::Dimension {
                expected: grid.num_patches(),
                found: mask.len(),
            });
        }
        let (w, h) = grid.pixel_extent();
        let (w, h) = (w as usize, h as usize);
        let mut diff = vec![0i32; (h + 1) * (w + 1)];
        let ps = grid.patch_size as usize;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let r = i / grid.grid_w as usize;
            let c = i % grid.grid_w as usize;
            let (x0, y0) = (c * grid.stride as usize, r * grid.stride as usize);
            let (x1, y1) = (x0 + ps, y0 + ps);
            diff[y0 * (w + 1) + x0] += 1;
            diff[y0 * (w + 1) + x1] -= 1;
            diff[y1 * (w + 1) + x0] -= 1;
            diff[y1 * (w + 1) + x1] += 1;
        }
        // 2-D difference array -> per-pixel patch multiplicity -> covered flag
        let mut covered = vec![0u8; h * w];
        let mut row_acc = vec![0i32; w + 1];
        for y in 0..h {
            let mut run = 0i32;
            for x in 0..w {
                run += diff[y * (w + 1) + x];
                row_acc[x] += run;
                covered[y * w + x] = (row_acc[x] > 0) as u8;
            }
        }
        let mut prefix = vec![0.0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut run = 0.0;
            for x in 0..w {
                run += covered[y * w + x] as f64;
                prefix[(y + 1) * (w + 1) + x + 1] = prefix[y * (w + 1) + x + 1] + run;
            }
        }
        Ok(MaskCoverage {
            width: w,
            height: h,
            prefix,
        })
    }

    /// Covered area of `[0, x] x [0, y]` for real `x, y`.
    fn cumulative(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, self.width as f64);
        let y = y.clamp(0.0, self.height as f64);
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - xi as f64, y - yi as f64);
        let p = |xx: usize, yy: usize| {
            self.prefix[yy.min(self.height) * (self.width + 1) + xx.min(self.width)]
        };
        let (x1, y1) = ((xi + 1).min(self.width), (yi + 1).min(self.height));
        p(xi, yi) * (1.0 - fx) * (1.0 - fy)
            + p(x1, yi) * fx * (1.0 - fy)
            + p(xi, y1) * (1.0 - fx) * fy
            + p(x1, y1) * fx * fy
    }

    pub fn covered_area(&self, b: &BBox) -> f64 {
        self.cumulative(b.right(), b.bottom()) - self.cumulative(b.x, b.bottom())
            - self.cumulative(b.right(), b.y)
            + self.cumulative(b.x, b.y)
    }

    pub fn fraction(&self, b: &BBox) -> f64 {
        (self.covered_area(b) / b.area()).clamp(0.0, 1.0)
    }
}

/// Anchors with at least `overlap_fraction` of their area on masked pixels.
pub fn mask_to_negative_anchors(
    mask: &[bool],
    grid: &PatchGrid,
    anchors: &[AnchorBox],
    overlap_fraction: f64,
) -> Result<Vec<bool>> {
    let cov = MaskCoverage::new(mask, grid)?;
    Ok(anchors
        .iter()
        .map(|a| cov.fraction(&a.bbox) >= overlap_fraction - 1e-12)
        .collect())
}

/// Header of the labels file.
pub const LABELS_HEADER: &str = "image_id\tanchor_index\tlevel\trole\tmatched_gt\ts_max\n";

/// One labels-file row per anchor: `image_id anchor_index level role
/// matched_gt s_max`, with `-` for a missing match and `nan` for an anchor
/// without a pooled embedding. Similarities print in shortest round-trip form.
pub fn format_labels(image_id: u64, anchors: &[AnchorBox], labels: &[AnchorLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let m = l.matched_gt.map_or_else(|| "-".to_string(), |m| m.to_string());
        let s = l.similarity.map_or_else(|| "nan".to_string(), |s| s.to_string());
        out.push_str(&format!(
            "{image_id}\t{}\t{}\t{}\t{m}\t{s}\n",
            l.anchor_index, anchors[l.anchor_index].level, l.role
        ));
    }
    out
}

/// A parsed labels-file row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRow {
    pub image_id: u64,
    pub level: u32,
    pub label: AnchorLabel,
}

/// Parse a labels file; the header line is required.
pub fn parse_labels(text: &str) -> Result<Vec<LabelRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if format!("{h}\n") == LABELS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing labels header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |k: usize, what: &str| -> Result<u64> {
            f[k].parse::<u64>().map_err(|_| bad(format!("bad {what} {:?}", f[k])))
        };
        let image_id = num(0, "image id")?;
        let anchor_index = num(1, "anchor index")? as usize;
        let level = num(2, "level")? as u32;
        let role: Role = f[3].parse().map_err(bad)?;
        let matched_gt = match f[4] {
            "-" => None,
            _ => Some(num(4, "matched box")? as usize),
        };
        let similarity = match f[5] {
            "nan" => None,
            v => Some(v.parse::<f32>().map_err(|_| bad(format!("bad similarity {v:?}")))?),
        };
        out.push(LabelRow {
            image_id,
            level,
            label: AnchorLabel {
                anchor_index,
                role,
                matched_gt,
                similarity,
            },
        });
    }
    Ok(out)
}
