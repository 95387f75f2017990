//! Boxes, IoU, anchor generation and FCOS-style centerness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()
    }

    pub fn validated(self) -> Result<Self> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(Error::Format(format!("invalid box {self:?}")))
        }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point {
            x: self.x + self.w / 2.0,
            y: self.y + self.h / 2.0,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: Point) -> bool {
        p.x > self.x && p.x < self.right() && p.y > self.y && p.y < self.bottom()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Annotated ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: i64,
    /// Known (base) class vs. evaluation-only (novel) class.
    pub is_base: bool,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Multi-level anchor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub strides: Vec<u32>,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    /// Five-level FPN layout.
    fn default() -> Self {
        AnchorConfig {
            strides: vec![4, 8, 16, 32, 64],
            scales: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn new(strides: Vec<u32>, scales: Vec<f64>, aspect_ratios: Vec<f64>) -> Result<Self> {
        let c = AnchorConfig {
            strides,
            scales,
            aspect_ratios,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "anchor strides ({}) and scales ({}) must be non-empty and equal in length",
                self.strides.len(),
                self.scales.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("anchor strides must be positive".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("anchor scales must be positive".into()));
        }
        if self.aspect_ratios.is_empty()
            || self.aspect_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite()))
        {
            return Err(Error::Config(
                "aspect ratios must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub bbox: BBox,
    pub level: u32,
    /// Feature location the anchor is centred on.
    pub center: Point,
}

/// Anchor width and height for a scale and a w/h aspect ratio; area is
/// `scale^2`.
pub fn anchor_shape(scale: f64, ratio: f64) -> (f64, f64) {
    let r = ratio.sqrt();
    (scale * r, scale / r)
}

/// One anchor per (level, row, col, ratio), in that nesting order. The grid
/// at each level has `ceil(dim / stride)` cells per axis. Anchors are not
/// clipped to the image.
pub fn generate_anchors(image_w: u32, image_h: u32, config: &AnchorConfig) -> Vec<AnchorBox> {
    let mut out = Vec::new();
    for (level, (&stride, &scale)) in config.strides.iter().zip(&config.scales).enumerate() {
        let cols = image_w.div_ceil(stride);
        let rows = image_h.div_ceil(stride);
        let shapes: Vec<(f64, f64)> = config
            .aspect_ratios
            .iter()
            .map(|&r| anchor_shape(scale, r))
            .collect();
        let half = stride as f64 / 2.0;
        for row in 0..rows {
            for col in 0..cols {
                let c = Point {
                    x: (col * stride) as f64 + half,
                    y: (row * stride) as f64 + half,
                };
                for &(w, h) in &shapes {
                    out.push(AnchorBox {
                        bbox: BBox::new(c.x - w / 2.0, c.y - h / 2.0, w, h),
                        level: level as u32,
                        center: c,
                    });
                }
            }
        }
    }
    out
}

/// Distances from `loc` to the left, right, top and bottom sides of `gt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ltrb {
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
}

impl Ltrb {
    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.r, self.t, self.b]
    }
}

/// Signed side distances; negative components mean `loc` lies outside.
pub fn signed_ltrb(loc: Point, gt: &BBox) -> Ltrb {
    Ltrb {
        l: loc.x - gt.x,
        r: gt.right() - loc.x,
        t: loc.y - gt.y,
        b: gt.bottom() - loc.y,
    }
}

/// Regression target for a location strictly inside `gt`; `None` otherwise.
pub fn ltrb_target(loc: Point, gt: &BBox) -> Option<Ltrb> {
    gt.contains_strictly(loc).then(|| signed_ltrb(loc, gt))
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`, zero outside or on the
/// boundary.
pub fn centerness(loc: Point, gt: &BBox) -> f64 {
    match ltrb_target(loc, gt) {
        None => 0.0,
        Some(d) => {
            let h = d.l.min(d.r) / d.l.max(d.r);
            let v = d.t.min(d.b) / d.t.max(d.b);
            (h * v).sqrt()
        }
    }
}
