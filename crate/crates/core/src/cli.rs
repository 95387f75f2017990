//! Command-line front end. Each subcommand reads its inputs, writes its
//! outputs under `--out`, and prints a short summary on stdout. Failures go
//! to stderr as `bowlkit:error:<kind>: <message>`.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::coco::{self, CocoDataset};
use crate::codebook::{build_from_grids, ExemplarSet, DEFAULT_LAMBDA, DEFAULT_TOP_N};
use crate::error::{Error, Result};
use crate::evalkit::{self, Detection, DEFAULT_BUDGET};
use crate::geometry::{generate_anchors, AnchorBox, AnchorConfig, BBox, GtBox};
use crate::labeler::{
    self, label_pooled, GammaPolicy, ImageLabels, LabelConfig, PooledAnchors, Role,
    DEFAULT_GUARD_IOU, DEFAULT_IOU_POS,
};
use crate::probe::{self, AbConfig, AbReport, Condition, ProbeConfig};
use crate::store::{read_embeddings_normalized, write_embeddings, PatchGrid};
use crate::supervision::{self, cap_per_role, TargetRecord};
use crate::synthetic::{make_synthetic_dataset, SyntheticConfig};

pub const EXEMPLARS_FILE: &str = "exemplars.bwlx";
pub const TOP_EXEMPLARS_FILE: &str = "exemplars_top.bwlx";
pub const CODEBOOK_STATS_FILE: &str = "codebook_stats.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const LABEL_SUMMARY_FILE: &str = "label_summary.tsv";
pub const TARGETS_FILE: &str = "targets.tsv";
pub const AR_REPORT_FILE: &str = "ar_report.tsv";
pub const PRECISION_FILE: &str = "precision.tsv";
pub const AB_REPORT_FILE: &str = "ab_report.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.bwle";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const PROPOSALS_FILE: &str = "proposals.json";

const DEFAULT_SWEEP: [usize; 3] = [10, 100, 1000];

#[derive(Parser, Debug)]
#[command(name = "bowlkit", version, about = "Background exemplar codebooks, negative anchor mining and proposal recall evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Greedy exemplar codebook from an embedding file, full set and top-N.
    BuildCodebook,
    /// Positive, negative and ignored role per anchor.
    LabelAnchors,
    /// Objectness and regression targets from a labels file.
    AssignTargets,
    /// AR@k report for a detections file.
    Evaluate,
    /// Negative-anchor precision over a sweep of exemplar-set sizes.
    PrecisionCheck,
    /// Linear-probe comparison with and without mined negatives.
    ProbeAb,
    /// Planted synthetic embeddings, annotations and random proposals.
    MakeSynthetic,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// TOML file with defaults for any of the other flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    #[arg(long, global = true)]
    pub exemplars: Option<PathBuf>,
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub detections: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lambda: Option<f32>,
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
    /// `auto` for Otsu or a fixed cosine threshold.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub gamma: Option<GammaPolicy>,
    #[arg(long, global = true)]
    pub iou_pos: Option<f64>,
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Anchor levels allowed to receive negatives.
    #[arg(long, global = true, value_delimiter = ',')]
    pub levels: Option<Vec<u32>>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub per_role_cap: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub anchor_strides: Option<Vec<u32>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub anchor_scales: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub anchor_ratios: Option<Vec<f64>>,
    /// Exemplar-set sizes for precision-check.
    #[arg(long, global = true, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Count only negatives of this size in precision-check, as `WxH`.
    #[arg(long, global = true, value_parser = parse_size)]
    pub anchor_size: Option<(f64, f64)>,
    /// Report only this probe condition.
    #[arg(long, global = true)]
    pub condition: Option<Condition>,
    /// Noise level of generated synthetic data.
    #[arg(long, global = true)]
    pub noise: Option<f64>,
}

fn parse_size(s: &str) -> std::result::Result<(f64, f64), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad size {s:?}"));
    Ok((p(w)?, p(h)?))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GammaValue {
    Number(f64),
    Text(String),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AnchorsFile {
    strides: Option<Vec<u32>>,
    scales: Option<Vec<f64>>,
    aspect_ratios: Option<Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SyntheticFile {
    num_images: Option<usize>,
    train_images: Option<usize>,
    image_size: Option<u32>,
    patch_size: Option<u32>,
    stride: Option<u32>,
    dim: Option<usize>,
    num_textures: Option<usize>,
    textures_per_image: Option<usize>,
    num_base_classes: Option<usize>,
    num_novel_classes: Option<usize>,
    min_objects: Option<usize>,
    max_objects: Option<usize>,
    object_sizes: Option<Vec<u32>>,
    novel_share: Option<f64>,
    common_weight: Option<f64>,
    noise: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    embeddings: Option<PathBuf>,
    annotations: Option<PathBuf>,
    exemplars: Option<PathBuf>,
    labels: Option<PathBuf>,
    detections: Option<PathBuf>,
    out: Option<PathBuf>,
    lambda: Option<f32>,
    top_n: Option<usize>,
    gamma: Option<GammaValue>,
    iou_pos: Option<f64>,
    budget: Option<usize>,
    levels: Option<Vec<u32>>,
    threads: Option<usize>,
    seed: Option<u64>,
    per_role_cap: Option<usize>,
    sweep: Option<Vec<usize>>,
    anchor_size: Option<[f64; 2]>,
    condition: Option<String>,
    anchors: Option<AnchorsFile>,
    synthetic: Option<SyntheticFile>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut fc: FileConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        // Relative paths are taken from the config file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut fc.embeddings,
            &mut fc.annotations,
            &mut fc.exemplars,
            &mut fc.labels,
            &mut fc.detections,
            &mut fc.out,
        ] {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(fc)
    }
}

/// Settings after merging flags over the config file over the defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub embeddings: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub out: PathBuf,
    pub lambda: f32,
    /// `None` means the command's own default.
    pub top_n: Option<usize>,
    pub label: LabelConfig,
    pub budget: usize,
    /// `None` keeps the default pyramid (or the synthetic generator's).
    pub anchors: Option<AnchorConfig>,
    pub threads: Option<usize>,
    pub seed: u64,
    pub per_role_cap: Option<usize>,
    pub sweep: Vec<usize>,
    pub anchor_size: Option<(f64, f64)>,
    pub condition: Option<Condition>,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embeddings: None,
            annotations: None,
            exemplars: None,
            labels: None,
            detections: None,
            out: PathBuf::from("."),
            lambda: DEFAULT_LAMBDA,
            top_n: None,
            label: LabelConfig::default(),
            budget: DEFAULT_BUDGET,
            anchors: None,
            threads: None,
            seed: 0,
            per_role_cap: None,
            sweep: DEFAULT_SWEEP.to_vec(),
            anchor_size: None,
            condition: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let fc = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut rc = RunConfig::default();
        let pick = |f: &Option<PathBuf>, c: Option<PathBuf>| f.clone().or(c);
        rc.embeddings = pick(&flags.embeddings, fc.embeddings);
        rc.annotations = pick(&flags.annotations, fc.annotations);
        rc.exemplars = pick(&flags.exemplars, fc.exemplars);
        rc.labels = pick(&flags.labels, fc.labels);
        rc.detections = pick(&flags.detections, fc.detections);
        if let Some(o) = pick(&flags.out, fc.out) {
            rc.out = o;
        }
        rc.lambda = flags.lambda.or(fc.lambda).unwrap_or(DEFAULT_LAMBDA);
        rc.top_n = flags.top_n.or(fc.top_n);
        let file_gamma = match fc.gamma {
            None => None,
            Some(GammaValue::Number(g)) => Some(GammaPolicy::Fixed(g)),
            Some(GammaValue::Text(t)) => Some(t.parse().map_err(Error::Config)?),
        };
        rc.label = LabelConfig {
            iou_pos: flags.iou_pos.or(fc.iou_pos).unwrap_or(DEFAULT_IOU_POS),
            gamma: flags.gamma.or(file_gamma).unwrap_or_default(),
            guard_iou: Some(DEFAULT_GUARD_IOU),
            levels: flags.levels.clone().or(fc.levels),
        };
        rc.label.validate()?;
        rc.budget = flags.budget.or(fc.budget).unwrap_or(DEFAULT_BUDGET);
        if rc.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        rc.threads = flags.threads.or(fc.threads);
        if rc.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rc.seed = flags.seed.or(fc.seed).unwrap_or(0);
        rc.per_role_cap = flags.per_role_cap.or(fc.per_role_cap);
        rc.sweep = flags
            .sweep
            .clone()
            .or(fc.sweep)
            .unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
        if rc.sweep.is_empty() || rc.sweep.contains(&0) {
            return Err(Error::Config("sweep sizes must be at least 1".into()));
        }
        rc.anchor_size = flags.anchor_size.or(fc.anchor_size.map(|[w, h]| (w, h)));
        rc.condition = match (flags.condition, fc.condition) {
            (Some(c), _) => Some(c),
            (None, Some(s)) => Some(s.parse().map_err(Error::Config)?),
            (None, None) => None,
        };

        let fa = fc.anchors.unwrap_or_default();
        let overridden = flags.anchor_strides.is_some()
            || flags.anchor_scales.is_some()
            || flags.anchor_ratios.is_some()
            || fa.strides.is_some()
            || fa.scales.is_some()
            || fa.aspect_ratios.is_some();
        if overridden {
            let d = AnchorConfig::default();
            let a = AnchorConfig::new(
                flags.anchor_strides.clone().or(fa.strides).unwrap_or(d.strides),
                flags.anchor_scales.clone().or(fa.scales).unwrap_or(d.scales),
                flags.anchor_ratios.clone().or(fa.aspect_ratios).unwrap_or(d.aspect_ratios),
            )?;
            rc.anchors = Some(a);
        }

        let fs = fc.synthetic.unwrap_or_default();
        let mut s = SyntheticConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = fs.$f { s.$f = v; } )* };
        }
        take!(
            num_images,
            train_images,
            image_size,
            patch_size,
            stride,
            dim,
            num_textures,
            textures_per_image,
            num_base_classes,
            num_novel_classes,
            min_objects,
            max_objects,
            object_sizes,
            novel_share,
            common_weight,
            noise
        );
        if let Some(n) = flags.noise {
            s.noise = n;
        }
        s.seed = rc.seed;
        if let Some(a) = &rc.anchors {
            s.anchors = a.clone();
        }
        rc.synthetic = s;
        Ok(rc)
    }

    pub fn anchor_config(&self) -> AnchorConfig {
        self.anchors.clone().unwrap_or_default()
    }

    fn input<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        let p = path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required")))?;
        fs::metadata(p).map_err(|e| Error::io(p, e))?;
        Ok(p)
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_grids(path: &Path) -> Result<Vec<PatchGrid>> {
    let grids = read_embeddings_normalized(path)?;
    if grids.is_empty() {
        return Err(Error::EmptyDataset(format!("{} holds no patch grids", path.display())));
    }
    Ok(grids)
}

fn image_size(coco: &CocoDataset, grid: &PatchGrid) -> (u32, u32) {
    coco.image(grid.image_id)
        .map_or_else(|| grid.pixel_extent(), |im| (im.width, im.height))
}

pub fn cmd_build_codebook(rc: &RunConfig) -> Result<String> {
    let emb = rc.input(&rc.embeddings, "embeddings")?;
    let full_path = rc.output(EXEMPLARS_FILE)?;
    let grids = load_grids(emb)?;
    let dim = grids[0].dim as usize;
    let full = build_from_grids(&grids, dim, rc.lambda)?;
    let n = rc.top_n.unwrap_or(DEFAULT_TOP_N);
    let top = full.top_n(n)?;
    let kept: HashSet<u64> = top.info().iter().map(|i| i.insertion_index).collect();
    let patches: usize = grids.iter().map(|g| g.num_patches()).sum();
    let covered = grids
        .par_iter()
        .map(|g| -> Result<usize> {
            let mut c = 0;
            for (_, _, v) in g.patches() {
                if let Some((i, _)) = full.nearest(v)? {
                    c += kept.contains(&full.info()[i].insertion_index) as usize;
                }
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    full.save(&full_path)?;
    top.save(rc.output(TOP_EXEMPLARS_FILE)?)?;
    let stats = format!(
        "key\tvalue\npatches\t{patches}\nlambda\t{}\nexemplars\t{}\ntop_n\t{}\ntop_n_coverage\t{:.6}\n",
        rc.lambda,
        full.len(),
        top.len(),
        covered as f64 / patches as f64
    );
    write(&rc.output(CODEBOOK_STATS_FILE)?, &stats)?;
    log::info!("{} exemplars from {patches} patches", full.len());
    Ok(stats)
}

fn load_exemplars(path: &Path) -> Result<ExemplarSet> {
    let set = ExemplarSet::load(path)?;
    if set.is_empty() {
        return Err(Error::Config(format!("{} holds no exemplars", path.display())));
    }
    Ok(set)
}

struct PooledImage {
    image_id: u64,
    anchors: Vec<AnchorBox>,
    pooled: PooledAnchors,
    gts: Vec<GtBox>,
}

fn pool_images(grids: &[PatchGrid], coco: &CocoDataset, anchors: &AnchorConfig) -> Result<Vec<PooledImage>> {
    let gts = coco.gt_by_image();
    grids
        .par_iter()
        .map(|g| {
            let (w, h) = image_size(coco, g);
            let anchors = generate_anchors(w, h, anchors);
            let pooled = PooledAnchors::compute(&anchors, g)?;
            Ok(PooledImage {
                image_id: g.image_id,
                anchors,
                pooled,
                gts: gts.get(&g.image_id).cloned().unwrap_or_default(),
            })
        })
        .collect()
}

fn label_all(images: &[PooledImage], set: &ExemplarSet, cfg: &LabelConfig) -> Result<Vec<ImageLabels>> {
    images
        .par_iter()
        .map(|im| label_pooled(&im.anchors, &im.pooled, set, &im.gts, cfg))
        .collect()
}

pub fn cmd_label_anchors(rc: &RunConfig) -> Result<String> {
    let emb = rc.input(&rc.embeddings, "embeddings")?;
    let ann = rc.input(&rc.annotations, "annotations")?;
    let ex = rc.input(&rc.exemplars, "exemplars")?;
    let labels_path = rc.output(LABELS_FILE)?;
    let set = load_exemplars(ex)?;
    let coco = CocoDataset::load(ann)?;
    let grids = load_grids(emb)?;
    let images = pool_images(&grids, &coco, &rc.anchor_config())?;
    let labels = label_all(&images, &set, &rc.label)?;

    let mut text = String::from(labeler::LABELS_HEADER);
    let mut summary = String::from("image_id\tgamma\tpositive\tnegative\tignored\n");
    let mut totals = [0usize; 3];
    for (im, l) in images.iter().zip(&labels) {
        text.push_str(&labeler::format_labels(im.image_id, &im.anchors, &l.labels));
        let c = [l.count(Role::Positive), l.count(Role::Negative), l.count(Role::Ignored)];
        let gamma = l.gamma.map_or_else(|| "none".to_string(), |g| format!("{g:.8e}"));
        summary.push_str(&format!("{}\t{gamma}\t{}\t{}\t{}\n", im.image_id, c[0], c[1], c[2]));
        for (t, v) in totals.iter_mut().zip(c) {
            *t += v;
        }
    }
    write(&labels_path, &text)?;
    write(&rc.output(LABEL_SUMMARY_FILE)?, &summary)?;
    Ok(format!(
        "positive\t{}\nnegative\t{}\nignored\t{}\n",
        totals[0], totals[1], totals[2]
    ))
}

pub fn cmd_assign_targets(rc: &RunConfig) -> Result<String> {
    let labels_path = rc.input(&rc.labels, "labels")?;
    let ann = rc.input(&rc.annotations, "annotations")?;
    let out_path = rc.output(TARGETS_FILE)?;
    let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let rows = labeler::parse_labels(&text)?;
    let coco = CocoDataset::load(ann)?;
    let gts = coco.gt_by_image();
    let cfg = rc.anchor_config();

    // Rows of one image are contiguous; keep first-appearance order.
    let mut groups: Vec<(u64, Vec<labeler::LabelRow>)> = Vec::new();
    for r in rows {
        match groups.last_mut() {
            Some((id, g)) if *id == r.image_id => g.push(r),
            _ => {
                if groups.iter().any(|(id, _)| *id == r.image_id) {
                    return Err(Error::Consistency(format!(
                        "labels of image {} are not contiguous",
                        r.image_id
                    )));
                }
                groups.push((r.image_id, vec![r]));
            }
        }
    }
    let mut records: Vec<TargetRecord> = Vec::new();
    for (id, group) in &groups {
        let im = coco.image(*id).ok_or_else(|| {
            Error::Consistency(format!("image {id} is missing from the annotations"))
        })?;
        let anchors = generate_anchors(im.width, im.height, &cfg);
        if anchors.len() != group.len() {
            return Err(Error::Consistency(format!(
                "image {id}: {} labels but the anchor configuration gives {} anchors",
                group.len(),
                anchors.len()
            )));
        }
        if let Some(r) = group.iter().find(|r| {
            anchors
                .get(r.label.anchor_index)
                .map_or(true, |a| a.level != r.level)
        }) {
            return Err(Error::Consistency(format!(
                "image {id}: anchor {} does not match the anchor configuration",
                r.label.anchor_index
            )));
        }
        let labels: Vec<_> = group.iter().map(|r| r.label).collect();
        let empty = Vec::new();
        let g = gts.get(id).unwrap_or(&empty);
        let mut recs = supervision::assign_targets(*id, &labels, &anchors, g)?;
        if let Some(cap) = rc.per_role_cap {
            recs = cap_per_role(recs, cap);
        }
        records.extend(recs);
    }
    supervision::write_targets(&records, &out_path)?;
    let back = supervision::read_targets(&out_path)?;
    if back.len() != records.len() {
        return Err(Error::Consistency(format!(
            "wrote {} target records but read back {}",
            records.len(),
            back.len()
        )));
    }
    let pos = records.iter().filter(|r| r.role == Role::Positive).count();
    Ok(format!(
        "records\t{}\npositive\t{pos}\nnegative\t{}\n",
        records.len(),
        records.len() - pos
    ))
}

pub fn cmd_evaluate(rc: &RunConfig) -> Result<String> {
    let det = rc.input(&rc.detections, "detections")?;
    let ann = rc.input(&rc.annotations, "annotations")?;
    let out_path = rc.output(AR_REPORT_FILE)?;
    let dets = coco::load_detections(det)?;
    let gts = CocoDataset::load(ann)?.ground_truth();
    let table = evalkit::evaluate(&dets, &gts, rc.budget).to_table();
    write(&out_path, &table)?;
    Ok(table)
}

pub fn cmd_precision_check(rc: &RunConfig) -> Result<String> {
    let emb = rc.input(&rc.embeddings, "embeddings")?;
    let ann = rc.input(&rc.annotations, "annotations")?;
    let ex = rc.input(&rc.exemplars, "exemplars")?;
    let out_path = rc.output(PRECISION_FILE)?;
    let full = load_exemplars(ex)?;
    let coco = CocoDataset::load(ann)?;
    let all_gt = coco.ground_truth();
    let grids = load_grids(emb)?;
    let images = pool_images(&grids, &coco, &rc.anchor_config())?;

    let mut table = String::from("top_n\texemplars\tnegatives\tprecision\n");
    for &n in &rc.sweep {
        let set = full.top_n(n)?;
        let labels = label_all(&images, &set, &rc.label)?;
        let negatives: Vec<(u64, BBox)> = images
            .iter()
            .zip(&labels)
            .flat_map(|(im, l)| {
                l.labels
                    .iter()
                    .filter(|a| a.role == Role::Negative)
                    .map(move |a| (im.image_id, im.anchors[a.anchor_index].bbox))
            })
            .collect();
        let p = evalkit::negative_precision(&negatives, &all_gt, DEFAULT_GUARD_IOU, rc.anchor_size);
        let p = p.map_or_else(|| "undefined".to_string(), |p| format!("{p:.6}"));
        table.push_str(&format!("{n}\t{}\t{}\t{p}\n", set.len(), negatives.len()));
    }
    write(&out_path, &table)?;
    Ok(table)
}

/// Codebook used by the probe experiment: built from the training images,
/// cut to one exemplar per planted texture unless `--top-n` says otherwise.
pub fn synthetic_exemplars(ds: &crate::synthetic::SyntheticDataset, lambda: f32, top_n: Option<usize>) -> Result<ExemplarSet> {
    let cfg = &ds.config;
    let full = build_from_grids(&ds.grids[..cfg.train_images], cfg.dim, lambda)?;
    full.top_n(top_n.unwrap_or(cfg.num_textures))
}

pub fn ab_report(rc: &RunConfig) -> Result<AbReport> {
    let ds = make_synthetic_dataset(&rc.synthetic)?;
    let set = synthetic_exemplars(&ds, rc.lambda, rc.top_n)?;
    let config = AbConfig {
        probe: ProbeConfig {
            seed: rc.seed,
            ..ProbeConfig::default()
        },
        label: rc.label.clone(),
        anchors: ds.config.anchors.clone(),
        budget: rc.budget,
        per_role_cap: rc.per_role_cap,
    };
    probe::ab_experiment(&ds, &set, &config)
}

pub fn cmd_probe_ab(rc: &RunConfig) -> Result<String> {
    let out_path = rc.output(AB_REPORT_FILE)?;
    let report = ab_report(rc)?;
    let table: String = report
        .to_table()
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || rc.condition.map_or(true, |c| l.starts_with(&format!("{c}\t"))))
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    write(&out_path, &table)?;
    Ok(table)
}

/// Up to `budget` anchors per image with uniform random scores.
fn random_proposals(ds: &crate::synthetic::SyntheticDataset, budget: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    for im in &ds.annotations.images {
        let (w, h) = (im.width as f64, im.height as f64);
        let boxes: Vec<BBox> = generate_anchors(im.width, im.height, &ds.config.anchors)
            .iter()
            .filter_map(|a| a.bbox.clip(w, h))
            .collect();
        for b in boxes.choose_multiple(&mut rng, budget.min(boxes.len())) {
            out.push(Detection {
                image_id: im.id,
                bbox: *b,
                score: rng.gen(),
            });
        }
    }
    out
}

pub fn cmd_make_synthetic(rc: &RunConfig) -> Result<String> {
    let emb = rc.output(EMBEDDINGS_FILE)?;
    let ds = make_synthetic_dataset(&rc.synthetic)?;
    write_embeddings(&emb, &ds.grids)?;
    ds.annotations.save(rc.output(ANNOTATIONS_FILE)?)?;
    let props = random_proposals(&ds, rc.budget, rc.seed);
    coco::save_detections(&props, rc.output(PROPOSALS_FILE)?)?;
    Ok(format!(
        "images\t{}\nobjects\t{}\nproposals\t{}\n",
        ds.grids.len(),
        ds.annotations.annotations.len(),
        props.len()
    ))
}

pub fn dispatch(command: Command, rc: &RunConfig) -> Result<String> {
    match command {
        Command::BuildCodebook => cmd_build_codebook(rc),
        Command::LabelAnchors => cmd_label_anchors(rc),
        Command::AssignTargets => cmd_assign_targets(rc),
        Command::Evaluate => cmd_evaluate(rc),
        Command::PrecisionCheck => cmd_precision_check(rc),
        Command::ProbeAb => cmd_probe_ab(rc),
        Command::MakeSynthetic => cmd_make_synthetic(rc),
    }
}

pub fn execute(cli: &Cli) -> Result<String> {
    let rc = RunConfig::resolve(&cli.flags)?;
    match rc.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cli.command, &rc)),
        None => dispatch(cli.command, &rc),
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default();
            eprintln!("bowlkit:error:usage: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("bowlkit:error:{}: {e}", e.kind());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(args: &[&str]) -> Flags {
        let mut v = vec!["bowlkit", "evaluate"];
        v.extend_from_slice(args);
        Cli::try_parse_from(v).unwrap().flags
    }

    #[test]
    fn defaults() {
        let rc = RunConfig::resolve(&Flags::default()).unwrap();
        assert_eq!(rc.lambda, 0.2);
        assert_eq!(rc.top_n, None);
        assert_eq!(rc.label.iou_pos, 0.3);
        assert_eq!(rc.budget, 100);
        assert_eq!(rc.sweep, vec![10, 100, 1000]);
        assert!(matches!(rc.label.gamma, GammaPolicy::Otsu { .. }));
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(
            &cfg,
            "lambda = 0.3\nbudget = 7\ngamma = 0.5\nout = \"res\"\n[anchors]\nstrides = [16]\nscales = [32.0]\n[synthetic]\nnoise = 0.1\n",
        )
        .unwrap();
        let c = cfg.to_str().unwrap();
        let rc = RunConfig::resolve(&flags(&["--config", c, "--budget", "9"])).unwrap();
        assert_eq!(rc.lambda, 0.3);
        assert_eq!(rc.budget, 9);
        assert_eq!(rc.label.gamma, GammaPolicy::Fixed(0.5));
        assert_eq!(rc.out, dir.path().join("res"));
        assert_eq!(rc.anchor_config().strides, vec![16]);
        assert_eq!(rc.synthetic.anchors.scales, vec![32.0]);
        assert_eq!(rc.synthetic.noise, 0.1);
        let rc = RunConfig::resolve(&flags(&["--config", c, "--gamma", "auto", "--noise", "0"])).unwrap();
        assert!(matches!(rc.label.gamma, GammaPolicy::Otsu { .. }));
        assert_eq!(rc.synthetic.noise, 0.0);
    }

    #[test]
    fn bad_settings() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        fs::write(&cfg, "lamda = 0.3\n").unwrap();
        let e = RunConfig::resolve(&flags(&["--config", cfg.to_str().unwrap()])).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(RunConfig::resolve(&flags(&["--iou-pos", "1.5"])).is_err());
        assert!(RunConfig::resolve(&flags(&["--budget", "0"])).is_err());
        assert!(RunConfig::resolve(&flags(&["--sweep", "10,0"])).is_err());
        assert!(Cli::try_parse_from(["bowlkit", "probe-ab", "--condition", "both"]).is_err());
        assert!(Cli::try_parse_from(["bowlkit", "evaluate", "--gamma", "high"]).is_err());
    }

    #[test]
    fn list_and_size_flags() {
        let f = flags(&["--levels", "0,2", "--anchor-size", "128x128", "--sweep", "5,50"]);
        assert_eq!(f.levels, Some(vec![0, 2]));
        assert_eq!(f.anchor_size, Some((128.0, 128.0)));
        assert_eq!(f.sweep, Some(vec![5, 50]));
        assert!(parse_size("128").is_err());
    }
}
