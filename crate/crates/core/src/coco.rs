//! COCO-style annotation and detection files.
//!
//! Categories may carry `"split": "base"` or `"split": "novel"`; a missing
//! split means base.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{Detection, GroundTruth};
use crate::geometry::{BBox, GtBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub category_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl CocoAnnotation {
    pub fn bbox(&self) -> BBox {
        let [x, y, w, h] = self.bbox;
        BBox::new(x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let ds: CocoDataset = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashMap::new();
        for im in &self.images {
            if ids.insert(im.id, im).is_some() {
                return Err(Error::Format(format!("duplicate image id {}", im.id)));
            }
            if im.width == 0 || im.height == 0 {
                return Err(Error::Format(format!("image {} has zero size", im.id)));
            }
        }
        for a in &self.annotations {
            if !ids.contains_key(&a.image_id) {
                return Err(Error::Format(format!(
                    "annotation refers to unknown image {}",
                    a.image_id
                )));
            }
            a.bbox().validated()?;
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }

    fn split_of(&self) -> HashMap<i64, Split> {
        self.categories.iter().map(|c| (c.id, c.split)).collect()
    }

    /// All annotations as ground truth, base unless the category says novel.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        let split = self.split_of();
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                image_id: a.image_id,
                bbox: a.bbox(),
                class_id: a.category_id,
                is_base: split.get(&a.category_id).copied().unwrap_or_default() == Split::Base,
            })
            .collect()
    }

    /// Ground truth of one image in annotation order.
    pub fn gt_boxes(&self, image_id: u64) -> Vec<GtBox> {
        self.ground_truth()
            .into_iter()
            .filter(|g| g.image_id == image_id)
            .map(|g| GtBox {
                bbox: g.bbox,
                class_id: g.class_id,
                is_base: g.is_base,
            })
            .collect()
    }

    /// Ground truth grouped by image, annotation order kept.
    pub fn gt_by_image(&self) -> HashMap<u64, Vec<GtBox>> {
        let mut m: HashMap<u64, Vec<GtBox>> = HashMap::new();
        for g in self.ground_truth() {
            m.entry(g.image_id).or_default().push(GtBox {
                bbox: g.bbox,
                class_id: g.class_id,
                is_base: g.is_base,
            });
        }
        m
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DetectionFile {
    List(Vec<CocoAnnotation>),
    Wrapped { annotations: Vec<CocoAnnotation> },
}

/// Detections as a bare JSON array or an object with `annotations`; every
/// entry needs a finite score.
pub fn parse_detections(text: &str, origin: &Path) -> Result<Vec<Detection>> {
    let raw: DetectionFile = serde_json::from_str(text).map_err(|e| Error::Json {
        path: origin.to_path_buf(),
        source: e,
    })?;
    let list = match raw {
        DetectionFile::List(l) => l,
        DetectionFile::Wrapped { annotations } => annotations,
    };
    list.into_iter()
        .enumerate()
        .map(|(i, a)| {
            let score = a
                .score
                .filter(|s| s.is_finite())
                .ok_or_else(|| Error::Format(format!("detection {i} lacks a finite score")))?;
            Ok(Detection {
                image_id: a.image_id,
                bbox: a.bbox().validated()?,
                score,
            })
        })
        .collect()
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let list: Vec<CocoAnnotation> = dets
        .iter()
        .map(|d| CocoAnnotation {
            id: None,
            image_id: d.image_id,
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            category_id: 1,
            score: Some(d.score),
        })
        .collect();
    serde_json::to_string_pretty(&list).expect("detections serialize") + "\n"
}

pub fn save_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, detections_to_json(dets)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "images": [{"id": 1, "width": 64, "height": 48}],
        "annotations": [
            {"image_id": 1, "bbox": [0, 0, 10, 12], "category_id": 3},
            {"image_id": 1, "bbox": [20, 20, 5, 5], "category_id": 7}
        ],
        "categories": [{"id": 3, "name": "cup"}, {"id": 7, "split": "novel"}]
    }"#;

    #[test]
    fn parses_splits() {
        let ds = CocoDataset::from_json(DOC, Path::new("doc")).unwrap();
        let gt = ds.ground_truth();
        assert!(gt[0].is_base && !gt[1].is_base);
        assert_eq!(gt[0].bbox, BBox::new(0.0, 0.0, 10.0, 12.0));
        assert_eq!(ds.gt_boxes(1).len(), 2);
        let back = CocoDataset::from_json(&ds.to_json(), Path::new("back")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_unknown_image_and_bad_box() {
        let bad = DOC.replace("\"image_id\": 1, \"bbox\": [20", "\"image_id\": 9, \"bbox\": [20");
        assert!(matches!(CocoDataset::from_json(&bad, Path::new("x")), Err(Error::Format(_))));
        let neg = DOC.replace("[0, 0, 10, 12]", "[0, 0, -1, 12]");
        assert!(CocoDataset::from_json(&neg, Path::new("x")).is_err());
        assert!(matches!(CocoDataset::from_json("{", Path::new("x")), Err(Error::Json { .. })));
    }

    #[test]
    fn detection_shapes() {
        let list = r#"[{"image_id": 1, "bbox": [1, 2, 3, 4], "score": 0.5}]"#;
        let d = parse_detections(list, Path::new("d")).unwrap();
        assert_eq!(d[0].score, 0.5);
        let wrapped = format!(r#"{{"annotations": {list}}}"#);
        assert_eq!(parse_detections(&wrapped, Path::new("d")).unwrap(), d);
        let back = parse_detections(&detections_to_json(&d), Path::new("d")).unwrap();
        assert_eq!(back, d);
        let unscored = r#"[{"image_id": 1, "bbox": [1, 2, 3, 4]}]"#;
        assert!(matches!(parse_detections(unscored, Path::new("d")), Err(Error::Format(_))));
    }
}
