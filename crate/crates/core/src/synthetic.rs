//! Planted synthetic datasets: textured backgrounds, base-class and
//! novel-class objects, all as patch embeddings from orthogonal latent
//! directions plus noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage, Split};
use crate::error::{Error, Result};
use crate::geometry::{AnchorConfig, BBox};
use crate::store::PatchGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_images: usize,
    /// Leading images used for training; the rest are held out.
    pub train_images: usize,
    pub image_size: u32,
    pub patch_size: u32,
    pub stride: u32,
    pub dim: usize,
    pub num_textures: usize,
    pub textures_per_image: usize,
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Square object sizes; each must equal an anchor scale.
    pub object_sizes: Vec<u32>,
    /// Share of objects drawn from novel classes.
    pub novel_share: f64,
    /// Weight of the direction shared by every object class.
    pub common_weight: f64,
    /// Noise magnitude relative to the unit signal.
    pub noise: f64,
    pub anchors: AnchorConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            num_images: 24,
            train_images: 12,
            image_size: 256,
            patch_size: 16,
            stride: 8,
            dim: 32,
            num_textures: 8,
            textures_per_image: 1,
            num_base_classes: 3,
            num_novel_classes: 3,
            min_objects: 3,
            max_objects: 5,
            object_sizes: vec![32, 64],
            novel_share: 0.5,
            common_weight: 0.3,
            noise: 0.05,
            anchors: AnchorConfig {
                strides: vec![16, 32],
                scales: vec![32.0, 64.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
            },
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_images == 0 || self.image_size == 0 || self.patch_size == 0 || self.stride == 0 {
            return bad("image count and sizes must be positive");
        }
        if self.train_images > self.num_images {
            return bad("more training images than images");
        }
        if self.image_size < self.patch_size {
            return bad("image smaller than one patch");
        }
        if self.num_textures == 0 || self.textures_per_image == 0 || self.textures_per_image > self.num_textures {
            return bad("texture counts are inconsistent");
        }
        if self.num_base_classes == 0 || self.num_novel_classes == 0 {
            return bad("need at least one base and one novel class");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.object_sizes.is_empty() || self.object_sizes.iter().any(|&s| s == 0 || s > self.image_size) {
            return bad("object sizes must be positive and fit the image");
        }
        if !(0.0..=1.0).contains(&self.novel_share) {
            return bad("novel_share must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.common_weight >= 0.0) {
            return bad("noise and common weight must be nonnegative");
        }
        if self.dim < self.num_latents() {
            return Err(Error::Config(format!(
                "dim {} cannot hold {} orthogonal latent directions",
                self.dim,
                self.num_latents()
            )));
        }
        self.anchors.validate()?;
        for &s in &self.object_sizes {
            if !self.anchors.scales.iter().any(|&a| a == s as f64) {
                return Err(Error::Config(format!(
                    "object size {s} is not an anchor scale"
                )));
            }
        }
        Ok(())
    }

    fn num_latents(&self) -> usize {
        self.num_textures + self.num_base_classes + self.num_novel_classes + 1
    }

    pub fn grid_side(&self) -> u32 {
        (self.image_size - self.patch_size) / self.stride + 1
    }
}

/// Orthonormal latent directions.
#[derive(Debug, Clone)]
pub struct Latents {
    pub textures: Vec<Vec<f64>>,
    pub base: Vec<Vec<f64>>,
    pub novel: Vec<Vec<f64>>,
    pub common: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub grids: Vec<PatchGrid>,
    pub annotations: CocoDataset,
    pub latents: Latents,
    /// Which latent texture each background patch uses, per image, row-major.
    pub texture_map: Vec<Vec<usize>>,
}

impl SyntheticDataset {
    pub fn train_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.grids[..self.config.train_images].iter().map(|g| g.image_id)
    }

    pub fn eval_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.grids[self.config.train_images..].iter().map(|g| g.image_id)
    }

    /// Base and novel category ids.
    pub fn category_ids(&self) -> (Vec<i64>, Vec<i64>) {
        let nb = self.config.num_base_classes as i64;
        let nn = self.config.num_novel_classes as i64;
        ((1..=nb).collect(), (nb + 1..=nb + nn).collect())
    }
}

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= p * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn noisy_unit(rng: &mut ChaCha8Rng, signal: &[f64], noise: f64) -> Vec<f32> {
    let d = signal.len() as f64;
    let v: Vec<f64> = if noise == 0.0 {
        signal.to_vec()
    } else {
        signal
            .iter()
            .map(|&s| s + noise * rng.sample::<f64, _>(StandardNormal) / d.sqrt())
            .collect()
    };
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Top-left corners at which a square of `size` coincides with an anchor.
fn anchor_slots(cfg: &SyntheticConfig, size: u32) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (&stride, &scale) in cfg.anchors.strides.iter().zip(&cfg.anchors.scales) {
        if scale != size as f64 {
            continue;
        }
        let cells = cfg.image_size.div_ceil(stride);
        for r in 0..cells {
            for c in 0..cells {
                let x = (c * stride) as f64 + stride as f64 / 2.0 - scale / 2.0;
                let y = (r * stride) as f64 + stride as f64 / 2.0 - scale / 2.0;
                if x >= 0.0 && y >= 0.0 && x + scale <= cfg.image_size as f64 && y + scale <= cfg.image_size as f64 {
                    out.push((x, y));
                }
            }
        }
        break;
    }
    out
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.right() + gap <= b.x || b.right() + gap <= a.x || a.bottom() + gap <= b.y || b.bottom() + gap <= a.y
}

/// Generate a dataset. Deterministic per config.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs = orthonormal(&mut rng, cfg.num_latents(), cfg.dim).into_iter();
    let latents = Latents {
        textures: dirs.by_ref().take(cfg.num_textures).collect(),
        base: dirs.by_ref().take(cfg.num_base_classes).collect(),
        novel: dirs.by_ref().take(cfg.num_novel_classes).collect(),
        common: dirs.next().unwrap(),
    };
    let object_signal = |class: &[f64]| -> Vec<f64> {
        class
            .iter()
            .zip(&latents.common)
            .map(|(c, m)| c + cfg.common_weight * m)
            .collect()
    };
    let nb = cfg.num_base_classes as i64;
    let nn = cfg.num_novel_classes as i64;
    let base_ids: Vec<i64> = (1..=nb).collect();
    let novel_ids: Vec<i64> = (nb + 1..=nb + nn).collect();
    let side = cfg.grid_side();
    let half = cfg.patch_size as f64 / 2.0;
    let mut grids = Vec::with_capacity(cfg.num_images);
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut texture_map = Vec::new();
    for i in 0..cfg.num_images {
        let image_id = i as u64 + 1;
        // background: one texture, or vertical bands of several
        let mut textures: Vec<usize> = (0..cfg.num_textures).collect();
        textures.shuffle(&mut rng);
        textures.truncate(cfg.textures_per_image);
        let mut cuts: Vec<u32> = (1..side).collect();
        cuts.shuffle(&mut rng);
        cuts.truncate(cfg.textures_per_image - 1);
        cuts.sort_unstable();
        let band_of = |col: u32| cuts.iter().filter(|&&c| col >= c).count();

        let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut boxes: Vec<(BBox, bool, usize)> = Vec::new();
        let mut attempts = 0;
        while boxes.len() < n_obj && attempts < 200 {
            attempts += 1;
            let size = *cfg.object_sizes.choose(&mut rng).unwrap();
            let slots = anchor_slots(cfg, size);
            let Some(&(x, y)) = slots.choose(&mut rng) else { continue };
            let b = BBox::new(x, y, size as f64, size as f64);
            if boxes.iter().all(|(o, _, _)| separated(o, &b, cfg.stride as f64)) {
                let novel = rng.gen_bool(cfg.novel_share);
                let class = rng.gen_range(0..if novel { cfg.num_novel_classes } else { cfg.num_base_classes });
                boxes.push((b, novel, class));
            }
        }

        let mut data = Vec::with_capacity((side * side) as usize * cfg.dim);
        let mut tmap = Vec::with_capacity((side * side) as usize);
        for r in 0..side {
            for c in 0..side {
                let cx = (c * cfg.stride) as f64 + half;
                let cy = (r * cfg.stride) as f64 + half;
                let hit = boxes
                    .iter()
                    .find(|(b, _, _)| cx >= b.x && cx < b.right() && cy >= b.y && cy < b.bottom());
                let t = textures[band_of(c)];
                tmap.push(t);
                let v = match hit {
                    Some(&(_, novel, class)) => {
                        let dir = if novel { &latents.novel[class] } else { &latents.base[class] };
                        noisy_unit(&mut rng, &object_signal(dir), cfg.noise)
                    }
                    None => noisy_unit(&mut rng, &latents.textures[t], cfg.noise),
                };
                data.extend(v);
            }
        }
        grids.push(PatchGrid::new(image_id, side, side, cfg.patch_size, cfg.stride, cfg.dim as u32, data)?);
        texture_map.push(tmap);
        images.push(CocoImage {
            id: image_id,
            width: cfg.image_size,
            height: cfg.image_size,
        });
        for (b, novel, class) in boxes {
            annotations.push(CocoAnnotation {
                id: Some(annotations.len() as u64 + 1),
                image_id,
                bbox: [b.x, b.y, b.w, b.h],
                category_id: if novel { novel_ids[class] } else { base_ids[class] },
                score: None,
            });
        }
    }
    let categories = base_ids
        .iter()
        .map(|&id| (id, Split::Base))
        .chain(novel_ids.iter().map(|&id| (id, Split::Novel)))
        .map(|(id, split)| CocoCategory {
            id,
            name: Some(format!("{}{}", if split == Split::Base { "base" } else { "novel" }, id)),
            split,
        })
        .collect();
    Ok(SyntheticDataset {
        config: cfg.clone(),
        grids,
        annotations: CocoDataset {
            images,
            annotations,
            categories,
        },
        latents,
        texture_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::build_from_grids;
    use crate::geometry::{generate_anchors, iou};

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig { num_images: 4, train_images: 2, ..SyntheticConfig::default() };
        let a = make_synthetic_dataset(&cfg).unwrap();
        let b = make_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a.grids, b.grids);
        assert_eq!(a.annotations, b.annotations);
        let c = make_synthetic_dataset(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.grids, c.grids);
    }

    #[test]
    fn noiseless_background_matches_an_exemplar() {
        let cfg = SyntheticConfig { noise: 0.0, num_images: 6, train_images: 6, ..SyntheticConfig::default() };
        let ds = make_synthetic_dataset(&cfg).unwrap();
        let set = build_from_grids(&ds.grids, cfg.dim, 0.2).unwrap();
        let gts = ds.annotations.ground_truth();
        for (g, tmap) in ds.grids.iter().zip(&ds.texture_map) {
            for (i, (r, c, v)) in g.patches().enumerate() {
                let cx = (c * g.stride) as f64 + 8.0;
                let cy = (r * g.stride) as f64 + 8.0;
                let on_object = gts.iter().any(|o| o.image_id == g.image_id && cx >= o.bbox.x && cx < o.bbox.right() && cy >= o.bbox.y && cy < o.bbox.bottom());
                if !on_object {
                    let tex: Vec<f32> = ds.latents.textures[tmap[i]].iter().map(|&x| x as f32).collect();
                    assert!((cos(v, &tex) - 1.0).abs() < 1e-6);
                    assert!((set.s_max(v).unwrap() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn clusters_are_separated() {
        let ds = make_synthetic_dataset(&SyntheticConfig { noise: 0.2, ..SyntheticConfig::default() }).unwrap();
        let g = &ds.grids[0];
        let tmap = &ds.texture_map[0];
        let gts = ds.annotations.gt_boxes(g.image_id);
        let label = |i: usize| -> i64 {
            let (r, c) = (i as u32 / g.grid_w, i as u32 % g.grid_w);
            let (cx, cy) = ((c * 8) as f64 + 8.0, (r * 8) as f64 + 8.0);
            gts.iter()
                .find(|o| cx >= o.bbox.x && cx < o.bbox.right() && cy >= o.bbox.y && cy < o.bbox.bottom())
                .map_or(-(tmap[i] as i64) - 1, |o| o.class_id)
        };
        let vs: Vec<&[f32]> = g.patches().map(|(_, _, v)| v).collect();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let s = cos(vs[i], vs[j]);
                if label(i) == label(j) {
                    within += s;
                    nw += 1;
                } else {
                    cross += s;
                    nc += 1;
                }
            }
        }
        assert!(within / nw as f64 > cross / nc as f64);
    }

    #[test]
    fn objects_sit_on_anchors_without_overlap() {
        let cfg = SyntheticConfig::default();
        let ds = make_synthetic_dataset(&cfg).unwrap();
        let anchors = generate_anchors(cfg.image_size, cfg.image_size, &cfg.anchors);
        let mut novel = 0;
        for im in &ds.annotations.images {
            let gts = ds.annotations.gt_boxes(im.id);
            assert!(gts.len() >= cfg.min_objects && gts.len() <= cfg.max_objects);
            for (i, a) in gts.iter().enumerate() {
                assert!(anchors.iter().any(|x| x.bbox == a.bbox));
                novel += !a.is_base as usize;
                for b in &gts[i + 1..] {
                    assert_eq!(iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
        assert!(novel > 0);
    }

    #[test]
    fn rejects_bad_configs() {
        let d = SyntheticConfig::default();
        assert!(make_synthetic_dataset(&SyntheticConfig { dim: 4, ..d.clone() }).is_err());
        assert!(make_synthetic_dataset(&SyntheticConfig { object_sizes: vec![48], ..d.clone() }).is_err());
        assert!(make_synthetic_dataset(&SyntheticConfig { train_images: 99, ..d }).is_err());
    }
}
