//! Ground-truth heatmap targets per feature level.
//!
//! Each object becomes a Gaussian bump centred on the integer cell that
//! contains its centre, on its class channel. The size map holds the box
//! width/height in image pixels and the offset map holds the sub-cell
//! remainder of the centre, both only at centre cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Annotation;
use crate::tensor::Tensor;

/// Feature strides of the three pyramid levels.
pub const STRIDES: [u32; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    /// Minimum IoU a corner-jittered box must retain.
    pub min_overlap: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { min_overlap: 0.5 }
    }
}

impl GaussianSpec {
    pub fn new(min_overlap: f64) -> Result<Self> {
        if !(min_overlap > 0.0 && min_overlap < 1.0) {
            return Err(Error::Config(format!(
                "min_overlap must lie in (0, 1), got {min_overlap}"
            )));
        }
        Ok(Self { min_overlap })
    }
}

/// Largest corner displacement keeping IoU >= `min_overlap`, taken as the
/// minimum over three cases: both corners shifted the same way, the box
/// shrunk on every side, and the box grown on every side.
pub fn gaussian_radius(box_w: f64, box_h: f64, min_overlap: f64) -> f64 {
    let (w, h, o) = (box_w, box_h, min_overlap);

    // (w - r)(h - r) / (2wh - (w - r)(h - r)) = o
    let b1 = w + h;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;

    // (w - 2r)(h - 2r) = o wh
    let a2 = 4.0;
    let b2 = 2.0 * (w + h);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt()) / (2.0 * a2);

    // wh = o (w + 2r)(h + 2r)
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (w + h);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);

    r1.min(r2).min(r3).max(0.0)
}

/// Training targets for one image at one stride.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTarget {
    pub stride: u32,
    /// `[C, H, W]`, values in `[0, 1]`
    pub heat: Tensor,
    /// `[2, H, W]`: box width and height in image pixels
    pub size: Tensor,
    /// `[2, H, W]`: centre remainder in cells, in `[0, 1)`
    pub offset: Tensor,
    /// `[1, H, W]`: 1 at centre cells
    pub mask: Tensor,
    pub stats: RenderStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub rendered: usize,
    /// Centre fell outside the feature grid.
    pub skipped: usize,
    /// Centre cell already held another object; size/offset overwritten.
    pub collisions: usize,
}

impl HeatmapTarget {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.heat.shape();
        (s[1], s[2])
    }

    pub fn num_positive(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Render heat, size, offset and mask maps for `annotations` at `stride`.
pub fn render(
    annotations: &[Annotation],
    image_w: usize,
    image_h: usize,
    stride: u32,
    num_classes: usize,
    spec: GaussianSpec,
) -> Result<HeatmapTarget> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let s = stride as usize;
    let (gh, gw) = (image_h.div_ceil(s), image_w.div_ceil(s));
    let mut heat = Tensor::zeros(&[num_classes, gh, gw]);
    let mut size = Tensor::zeros(&[2, gh, gw]);
    let mut offset = Tensor::zeros(&[2, gh, gw]);
    let mut mask = Tensor::zeros(&[1, gh, gw]);
    let mut stats = RenderStats::default();
    let sf = f64::from(stride);

    for ann in annotations {
        if ann.class_id >= num_classes {
            return Err(Error::Data(format!(
                "class id {} out of range for {num_classes} classes",
                ann.class_id
            )));
        }
        let (cx, cy) = ann.bbox.center();
        let (fx, fy) = (cx / sf, cy / sf);
        if !(fx >= 0.0 && fy >= 0.0 && fx < gw as f64 && fy < gh as f64) {
            stats.skipped += 1;
            continue;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (bw, bh) = (ann.bbox.width(), ann.bbox.height());
        let radius = gaussian_radius(bw / sf, bh / sf, spec.min_overlap).max(1.0);
        splat(&mut heat, ann.class_id, ix, iy, radius);

        if mask.get(&[0, iy, ix]) > 0.0 {
            stats.collisions += 1;
        }
        mask.set(&[0, iy, ix], 1.0);
        size.set(&[0, iy, ix], bw);
        size.set(&[1, iy, ix], bh);
        offset.set(&[0, iy, ix], fx - ix as f64);
        offset.set(&[1, iy, ix], fy - iy as f64);
        stats.rendered += 1;
    }

    Ok(HeatmapTarget {
        stride,
        heat,
        size,
        offset,
        mask,
        stats,
    })
}

/// Max-combine a Gaussian with sigma = radius / 3 centred on cell (cx, cy).
fn splat(heat: &mut Tensor, class: usize, cx: usize, cy: usize, radius: f64) {
    let (gh, gw) = (heat.shape()[1], heat.shape()[2]);
    let sigma = radius / 3.0;
    let denom = 2.0 * sigma * sigma;
    let r = radius.floor() as usize;
    for y in cy.saturating_sub(r)..(cy + r + 1).min(gh) {
        for x in cx.saturating_sub(r)..(cx + r + 1).min(gw) {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            let v = (-(dx * dx + dy * dy) / denom).exp();
            let o = heat.offset(&[class, y, x]);
            let cell = &mut heat.data_mut()[o];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Pyramid level an object is trained on, chosen by its longer side.
///
/// Objects up to 64 px go to stride 8, up to 128 px to stride 16, the rest
/// to stride 32.
pub fn assign_stride(ann: &Annotation) -> u32 {
    let side = ann.bbox.width().max(ann.bbox.height());
    if side <= 64.0 {
        8
    } else if side <= 128.0 {
        16
    } else {
        32
    }
}

/// Render all three pyramid levels, each object on its assigned level.
pub fn render_pyramid(
    annotations: &[Annotation],
    image_w: usize,
    image_h: usize,
    num_classes: usize,
    spec: GaussianSpec,
) -> Result<Vec<HeatmapTarget>> {
    STRIDES
        .iter()
        .map(|&stride| {
            let anns: Vec<Annotation> = annotations
                .iter()
                .filter(|a| assign_stride(a) == stride)
                .cloned()
                .collect();
            render(&anns, image_w, image_h, stride, num_classes, spec)
        })
        .collect()
}

/// One heat channel as an 8-bit greyscale image, `round(255 * heat)`.
pub fn heat_channel_to_gray(target: &HeatmapTarget, class: usize) -> image::GrayImage {
    let (gh, gw) = target.grid();
    image::GrayImage::from_fn(gw as u32, gh as u32, |x, y| {
        let v = target.heat.get(&[class, y as usize, x as usize]);
        image::Luma([(255.0 * v.clamp(0.0, 1.0)).round() as u8])
    })
}
