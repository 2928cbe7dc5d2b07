use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, Dataset, ImageRecord, TileOrigin};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile: u32,
    pub overlap: u32,
    /// A cut box survives in a tile when at least this fraction of its area
    /// lies inside.
    pub keep_fraction: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            tile: 1024,
            overlap: 200,
            keep_fraction: 0.5,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        if self.overlap >= self.tile {
            return Err(Error::Config(format!(
                "overlap {} must be smaller than tile {}",
                self.overlap, self.tile
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// Tile start offsets along one axis of length `len`.
///
/// Steps of `tile - overlap` from 0 while a tile still fits short of the
/// end, then one tile flush with the end. An axis no longer than `tile`
/// gets the single offset 0.
pub fn tile_positions(len: u32, tile: u32, overlap: u32) -> Vec<u32> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut out = Vec::new();
    let mut p = 0;
    while p + tile < len {
        out.push(p);
        p += step;
    }
    out.push(len - tile);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ZeroArea,
    KeepFraction,
}

/// An annotation that ended up in no tile at all.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DroppedAnnotation {
    /// Index into the input annotation list.
    pub index: usize,
    pub image_id: String,
    pub reason: DropReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileOutput {
    pub dataset: Dataset,
    pub dropped: Vec<DroppedAnnotation>,
}

struct ImageTiles {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    dropped: Vec<DroppedAnnotation>,
}

/// Cut every image into `spec.tile`-sized tiles and remap annotations.
///
/// Images that fit inside one tile pass through unchanged. Tile ids are
/// `<image>_<x>_<y>`.
pub fn tile(ds: &Dataset, spec: TileSpec) -> Result<TileOutput> {
    spec.validate()?;
    let mut per_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, a) in ds.annotations.iter().enumerate() {
        per_image.entry(a.image_id.as_str()).or_default().push(i);
    }
    let none = Vec::new();
    let parts = par::map(&ds.images, |im| {
        let idx = per_image.get(im.id.as_str()).unwrap_or(&none);
        tile_image(ds, im, idx, spec)
    });

    let mut out = Dataset {
        classes: ds.classes.clone(),
        ..Default::default()
    };
    let mut dropped = Vec::new();
    for p in parts {
        out.images.extend(p.images);
        out.annotations.extend(p.annotations);
        dropped.extend(p.dropped);
    }
    Ok(TileOutput { dataset: out, dropped })
}

fn tile_image(ds: &Dataset, im: &ImageRecord, idx: &[usize], spec: TileSpec) -> ImageTiles {
    let mut res = ImageTiles {
        images: Vec::new(),
        annotations: Vec::new(),
        dropped: Vec::new(),
    };
    if im.width <= spec.tile && im.height <= spec.tile {
        res.images.push(im.clone());
        res.annotations.extend(idx.iter().map(|&i| ds.annotations[i].clone()));
        return res;
    }
    let xs = tile_positions(im.width, spec.tile, spec.overlap);
    let ys = tile_positions(im.height, spec.tile, spec.overlap);
    let (tw, th) = (spec.tile.min(im.width), spec.tile.min(im.height));
    let mut placed = vec![false; idx.len()];
    for &y in &ys {
        for &x in &xs {
            let id = format!("{}_{x}_{y}", im.id);
            let rect = BBox::new(
                f64::from(x),
                f64::from(y),
                f64::from(x + tw),
                f64::from(y + th),
            );
            for (k, &i) in idx.iter().enumerate() {
                let a = &ds.annotations[i];
                let area = a.bbox.area();
                if area <= 0.0 {
                    continue;
                }
                let Some(cut) = a.bbox.intersection(&rect) else {
                    continue;
                };
                if cut.area() >= spec.keep_fraction * area {
                    placed[k] = true;
                    res.annotations.push(AnnotationRecord {
                        image_id: id.clone(),
                        class: a.class.clone(),
                        bbox: cut.translate(-rect.x1, -rect.y1),
                    });
                }
            }
            res.images.push(ImageRecord {
                id,
                width: tw,
                height: th,
                file: im.file.clone(),
                origin: Some(TileOrigin {
                    source: im.id.clone(),
                    x,
                    y,
                }),
            });
        }
    }
    for (k, &i) in idx.iter().enumerate() {
        if !placed[k] {
            let reason = if ds.annotations[i].bbox.area() <= 0.0 {
                DropReason::ZeroArea
            } else {
                DropReason::KeepFraction
            };
            res.dropped.push(DroppedAnnotation {
                index: i,
                image_id: im.id.clone(),
                reason,
            });
        }
    }
    res
}
