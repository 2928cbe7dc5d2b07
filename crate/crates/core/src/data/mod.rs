//! Dataset ingestion (ODJSON), tiling, class statistics, class mapping and
//! the synthetic generator.
//!
//! ODJSON layout:
//!
//! ```json
//! {
//!   "classes": ["vehicle", "ship"],
//!   "images": [{"id": "a", "width": 800, "height": 800, "file": "a.png"}],
//!   "annotations": [{"image_id": "a", "class": "ship", "box": [x1, y1, x2, y2]}]
//! }
//! ```
//!
//! Image files are resolved relative to the JSON file. Tiles produced by
//! [`tile()`] keep the source file and record their crop in `origin`.

mod classmap;
mod raster;
mod stats;
mod synth;
mod tile;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox};

pub use classmap::{dota2dior_table, map_classes, ClassMapReport, DIOR_COMMON_CLASSES};
pub use raster::{load_image, pad_to_multiple, rgb_to_tensor};
pub use stats::{class_stats, dota2dior_fixture, ClassCount, ClassStats};
pub use synth::{synthesize, ClassShape, Shape, SynthOutput, SyntheticSpec};
pub use tile::{tile, tile_positions, DropReason, DroppedAnnotation, TileOutput, TileSpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub file: String,
    /// Set on tiles: the source image and the tile's top-left corner in it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<TileOrigin>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileOrigin {
    pub source: String,
    pub x: u32,
    pub y: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Dataset {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("ODJSON: {e}")))
    }

    /// Read, validate and clip. Returns the dataset and the number of boxes
    /// that had to be clipped into their image.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, usize)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ds: Dataset = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let clipped = ds.validate_and_clip()?;
        Ok((ds, clipped))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Pretty JSON with a trailing newline; key order follows the structs.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serialises");
        s.push('\n');
        s
    }

    /// Check references and clip boxes to their image. Returns the clip count.
    pub fn validate_and_clip(&mut self) -> Result<usize> {
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::Data(format!("duplicate class `{c}`")));
            }
        }
        let mut sizes = HashMap::new();
        for im in &self.images {
            if sizes.insert(im.id.as_str(), (im.width, im.height)).is_some() {
                return Err(Error::Data(format!("duplicate image id `{}`", im.id)));
            }
        }
        let mut clipped = 0;
        for (i, a) in self.annotations.iter_mut().enumerate() {
            let Some(&(w, h)) = sizes.get(a.image_id.as_str()) else {
                return Err(Error::Data(format!(
                    "annotation {i} references unknown image `{}`",
                    a.image_id
                )));
            };
            if !seen.contains(a.class.as_str()) {
                return Err(Error::Data(format!(
                    "annotation {i} references unknown class `{}`",
                    a.class
                )));
            }
            if !a.bbox.is_finite() {
                return Err(Error::Data(format!("annotation {i} has a non-finite box")));
            }
            let (w, h) = (f64::from(w), f64::from(h));
            if !a.bbox.is_within(w, h) {
                a.bbox = a.bbox.clip(w, h);
                clipped += 1;
            }
        }
        Ok(clipped)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Annotations grouped by image id, class names resolved to indices.
    /// Every image appears, even those without annotations.
    pub fn annotations_by_image(&self) -> Result<BTreeMap<String, Vec<Annotation>>> {
        let index: HashMap<&str, usize> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut out: BTreeMap<String, Vec<Annotation>> =
            self.images.iter().map(|im| (im.id.clone(), Vec::new())).collect();
        for a in &self.annotations {
            let class_id = *index
                .get(a.class.as_str())
                .ok_or_else(|| Error::Data(format!("unknown class `{}`", a.class)))?;
            out.entry(a.image_id.clone()).or_default().push(Annotation {
                bbox: a.bbox,
                class_id,
                image_id: a.image_id.clone(),
            });
        }
        Ok(out)
    }
}
