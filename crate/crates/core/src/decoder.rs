//! NMS-free decoding of heatmap peaks into boxes.
//!
//! A cell is a peak when a 3x3, stride-1, same-padded max-pool leaves its
//! value unchanged. Every cell of a tied plateau passes that test, so all of
//! them are kept. The surviving cells are ranked by score and read out
//! against the size and offset maps; no suppression step follows.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::tensor::{maxpool2d, Tensor};

pub const DEFAULT_SCORE_FLOOR: f64 = 0.01;
pub const DEFAULT_PROPOSALS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub score: f64,
    pub stride: u32,
}

/// Peaks in descending score order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
}

impl PeakSet {
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }
}

/// Descending score; ties broken by (class, y, x) so output is total-ordered.
fn peak_order(a: &Peak, b: &Peak) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.cell_y.cmp(&b.cell_y))
        .then(a.cell_x.cmp(&b.cell_x))
}

fn chw(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{what} must be [C, H, W]"),
        }),
    }
}

/// Local maxima of `heat` (`[C, H, W]`) at or above `score_floor`, top `k`.
pub fn extract_peaks(heat: &Tensor, k: usize, score_floor: f64, stride: u32) -> Result<PeakSet> {
    let [c, h, w] = chw(heat, "heatmap")?;
    let as4 = heat.clone().reshape(&[1, c, h, w])?;
    let pooled = maxpool2d(&as4, 3, 1, 1)?;

    let mut peaks: Vec<Peak> = heat
        .data()
        .iter()
        .zip(pooled.data())
        .enumerate()
        .filter(|&(_, (&v, &m))| v == m && v >= score_floor)
        .map(|(i, (&v, _))| Peak {
            class_id: i / (h * w),
            cell_y: (i / w) % h,
            cell_x: i % w,
            score: v,
            stride,
        })
        .collect();

    if peaks.len() > k && k > 0 {
        peaks.select_nth_unstable_by(k - 1, peak_order);
        peaks.truncate(k);
    }
    if k == 0 {
        peaks.clear();
    }
    peaks.sort_unstable_by(peak_order);
    Ok(PeakSet { peaks })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Negative width/height predictions clamped to zero.
    pub clamped_sizes: usize,
}

/// Regress one box per peak from `size` and `offset` (`[2, H, W]` each),
/// clipped to the image.
pub fn decode(
    peaks: &PeakSet,
    size: &Tensor,
    offset: &Tensor,
    image_w: f64,
    image_h: f64,
) -> Result<(Vec<Detection>, DecodeStats)> {
    let [sc, sh, sw] = chw(size, "size map")?;
    let [oc, oh, ow] = chw(offset, "offset map")?;
    if sc != 2 || oc != 2 || (sh, sw) != (oh, ow) {
        return Err(Error::ShapeMismatch {
            op: "decode (size vs offset)",
            lhs: size.shape().to_vec(),
            rhs: offset.shape().to_vec(),
        });
    }
    let mut stats = DecodeStats::default();
    let mut dets = Vec::with_capacity(peaks.len());
    for p in &peaks.peaks {
        if p.cell_x >= sw || p.cell_y >= sh {
            return Err(Error::Data(format!(
                "peak at ({}, {}) outside {sw}x{sh} regression grid",
                p.cell_x, p.cell_y
            )));
        }
        let s = f64::from(p.stride);
        let cx = (p.cell_x as f64 + offset.get(&[0, p.cell_y, p.cell_x])) * s;
        let cy = (p.cell_y as f64 + offset.get(&[1, p.cell_y, p.cell_x])) * s;
        let mut bw = size.get(&[0, p.cell_y, p.cell_x]);
        let mut bh = size.get(&[1, p.cell_y, p.cell_x]);
        if bw < 0.0 || bh < 0.0 {
            stats.clamped_sizes += 1;
            bw = bw.max(0.0);
            bh = bh.max(0.0);
        }
        dets.push(Detection {
            bbox: BBox::from_center(cx, cy, bw, bh).clip(image_w, image_h),
            class_id: p.class_id,
            score: p.score,
        });
    }
    Ok((dets, stats))
}

/// Heat probabilities and regression maps of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelMaps {
    pub stride: u32,
    /// `[C, H, W]` probabilities
    pub heat: Tensor,
    pub size: Tensor,
    pub offset: Tensor,
}

/// Decode every level with a per-level budget of `k_total`, merge, re-rank
/// by score and keep the best `k_total`.
pub fn propose(
    levels: &[LevelMaps],
    k_total: usize,
    score_floor: f64,
    image_w: f64,
    image_h: f64,
) -> Result<(Vec<Detection>, DecodeStats)> {
    let mut all = Vec::new();
    let mut stats = DecodeStats::default();
    for level in levels {
        let peaks = extract_peaks(&level.heat, k_total, score_floor, level.stride)?;
        let (dets, s) = decode(&peaks, &level.size, &level.offset, image_w, image_h)?;
        stats.clamped_sizes += s.clamped_sizes;
        all.extend(dets);
    }
    // Stable: equal scores keep level order, so smaller budgets are prefixes.
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(k_total);
    Ok((all, stats))
}

/// One line of a detections JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[DetectionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("detections line {}: {e}", n + 1)))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::Data(format!(
                "detections line {}: score {} outside [0, 1]",
                n + 1,
                r.score
            )));
        }
        records.push(r);
    }
    Ok(records)
}
