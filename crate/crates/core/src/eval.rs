//! Precision, recall, F1, AP and mAP over IoU thresholds 0.50:0.05:0.95.
//!
//! Matching is greedy per image and class: detections in descending score
//! order each claim the unmatched ground truth of highest IoU, and count as
//! true positives when that IoU reaches the threshold.
//!
//! AP is the uninterpolated rectangular sum `sum_k (R_k - R_{k-1}) P_k`
//! over the score-sorted sweep, with one point per distinct score. This is
//! not COCO's 101-point interpolated AP and the numbers are not comparable
//! to COCO tooling. Averaging over classes and thresholds commutes here, so
//! the order of the two means does not matter.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, Detection};
use crate::par;

/// 0.50, 0.55, ..., 0.95
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const MAX_DETECTIONS_PER_IMAGE: usize = 256;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedDetection {
    pub class_id: usize,
    pub score: f64,
    /// TP flag per IoU threshold.
    pub tp: Vec<bool>,
}

/// Matching outcome of one or more images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub thresholds: Vec<f64>,
    pub detections: Vec<MatchedDetection>,
    /// Ground-truth count per class id.
    pub gt_per_class: BTreeMap<usize, usize>,
}

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy matching of one image's detections against its ground truth.
/// Only the best [`MAX_DETECTIONS_PER_IMAGE`] detections take part.
pub fn match_image(dets: &[Detection], gts: &[Annotation], thresholds: &[f64]) -> MatchResult {
    let mut dets = dets.to_vec();
    dets.sort_by(by_score_desc);
    dets.truncate(MAX_DETECTIONS_PER_IMAGE);

    let mut gt_per_class = BTreeMap::new();
    for g in gts {
        *gt_per_class.entry(g.class_id).or_insert(0) += 1;
    }

    let mut out = Vec::with_capacity(dets.len());
    let classes: BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    for class in classes {
        let class_gts: Vec<&Annotation> = gts.iter().filter(|g| g.class_id == class).collect();
        let mut taken = vec![vec![false; class_gts.len()]; thresholds.len()];
        for d in dets.iter().filter(|d| d.class_id == class) {
            let ious: Vec<f64> = class_gts.iter().map(|g| iou(&d.bbox, &g.bbox)).collect();
            let tp = thresholds
                .iter()
                .zip(taken.iter_mut())
                .map(|(&t, taken)| {
                    let best = (0..ious.len())
                        .filter(|&j| !taken[j])
                        .fold(None::<usize>, |best, j| match best {
                            Some(b) if ious[b] >= ious[j] => Some(b),
                            _ => Some(j),
                        });
                    match best {
                        Some(j) if ious[j] >= t => {
                            taken[j] = true;
                            true
                        }
                        _ => false,
                    }
                })
                .collect();
            out.push(MatchedDetection {
                class_id: class,
                score: d.score,
                tp,
            });
        }
    }
    MatchResult {
        thresholds: thresholds.to_vec(),
        detections: out,
        gt_per_class,
    }
}

impl MatchResult {
    /// Concatenate per-image results in order.
    pub fn merge(parts: impl IntoIterator<Item = MatchResult>) -> MatchResult {
        let mut all = MatchResult::default();
        for p in parts {
            if all.thresholds.is_empty() {
                all.thresholds = p.thresholds.clone();
            }
            all.detections.extend(p.detections);
            for (c, n) in p.gt_per_class {
                *all.gt_per_class.entry(c).or_insert(0) += n;
            }
        }
        all
    }

    pub fn num_gt(&self, class: usize) -> usize {
        self.gt_per_class.get(&class).copied().unwrap_or(0)
    }

    /// TP/FP/FN for detections scoring at least `score_t`, at threshold
    /// index `t`. `class = None` pools every class.
    pub fn counts(&self, class: Option<usize>, t: usize, score_t: f64) -> Counts {
        let in_class = |c: usize| class.is_none_or(|k| k == c);
        let mut tp = 0;
        let mut fp = 0;
        for d in self
            .detections
            .iter()
            .filter(|d| in_class(d.class_id) && d.score >= score_t)
        {
            if d.tp[t] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let gt: usize = self
            .gt_per_class
            .iter()
            .filter(|(&c, _)| in_class(c))
            .map(|(_, &n)| n)
            .sum();
        Counts {
            tp,
            fp,
            fn_: gt - tp,
        }
    }

    /// Precision/recall sweep for one class at threshold index `t`.
    pub fn curve(&self, class: usize, t: usize) -> PRCurve {
        let mut flags: Vec<(f64, bool)> = self
            .detections
            .iter()
            .filter(|d| d.class_id == class)
            .map(|d| (d.score, d.tp[t]))
            .collect();
        flags.sort_by(|a, b| b.0.total_cmp(&a.0));
        PRCurve::from_sorted_flags(class, self.thresholds[t], &flags, self.num_gt(class))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    /// `P = TP/(TP+FP)`, `R = TP/(TP+FN)`, `F1 = 2PR/(P+R)`; each 0 when
    /// its denominator is 0.
    pub fn pr_f1(&self) -> PrF1 {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrF1 {
            precision,
            recall,
            f1,
        }
    }
}

/// Precision/recall points at each distinct score threshold, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct PRCurve {
    pub class_id: usize,
    pub iou_threshold: f64,
    pub num_gt: usize,
    /// `(recall, precision)`, recall non-decreasing.
    pub points: Vec<(f64, f64)>,
}

impl PRCurve {
    /// Build from `(score, is_tp)` pairs already sorted by descending score.
    /// Equal scores form one threshold and yield a single point.
    pub fn from_sorted_flags(class_id: usize, iou_threshold: f64, flags: &[(f64, bool)], num_gt: usize) -> Self {
        let mut points = Vec::new();
        let (mut tp, mut seen) = (0usize, 0usize);
        let mut i = 0;
        while i < flags.len() {
            let score = flags[i].0;
            while i < flags.len() && flags[i].0 == score {
                tp += usize::from(flags[i].1);
                seen += 1;
                i += 1;
            }
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            points.push((recall, tp as f64 / seen as f64));
        }
        Self {
            class_id,
            iou_threshold,
            num_gt,
            points,
        }
    }
}

/// Rectangular AP; `None` when the class has no ground truth.
pub fn average_precision(curve: &PRCurve) -> Option<f64> {
    if curve.num_gt == 0 {
        return None;
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for &(r, p) in &curve.points {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    /// Mean AP over the IoU thresholds; `None` without ground truth.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    /// Precision, recall and F1 at the score threshold, averaged over IoU
    /// thresholds.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mP")]
    pub mp: f64,
    #[serde(rename = "mR")]
    pub mr: f64,
    #[serde(rename = "mF1")]
    pub mf1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub classes: Vec<ClassReport>,
    pub summary: Summary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Count classes without ground truth as AP 0 instead of skipping them.
    pub zero_gt_as_zero: bool,
    pub score_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            zero_gt_as_zero: false,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

/// Match every image (in parallel) and merge.
pub fn match_dataset(
    dets: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<Annotation>>,
    thresholds: &[f64],
) -> MatchResult {
    let ids: Vec<&String> = dets.keys().chain(gts.keys()).collect::<BTreeSet<_>>().into_iter().collect();
    let empty_d: Vec<Detection> = Vec::new();
    let empty_g: Vec<Annotation> = Vec::new();
    let parts = par::map(&ids, |id| {
        match_image(
            dets.get(*id).unwrap_or(&empty_d),
            gts.get(*id).unwrap_or(&empty_g),
            thresholds,
        )
    });
    MatchResult::merge(parts)
}

/// Per-class AP table and dataset means.
pub fn map_metric(
    dets: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<Annotation>>,
    class_names: &[String],
    opts: EvalOptions,
) -> Result<MapReport> {
    let total_gt: usize = gts.values().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::Data("no ground truth in the evaluation set".into()));
    }
    if let Some(bad) = gts
        .values()
        .flatten()
        .map(|a| a.class_id)
        .chain(dets.values().flatten().map(|d| d.class_id))
        .find(|&c| c >= class_names.len())
    {
        return Err(Error::Data(format!(
            "class id {bad} outside the {}-class list",
            class_names.len()
        )));
    }
    let thresholds = iou_thresholds();
    let matched = match_dataset(dets, gts, &thresholds);
    let nt = thresholds.len() as f64;

    let classes: Vec<ClassReport> = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let aps: Option<Vec<f64>> = (0..thresholds.len())
                .map(|t| average_precision(&matched.curve(c, t)))
                .collect();
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for t in 0..thresholds.len() {
                let m = matched.counts(Some(c), t, opts.score_threshold).pr_f1();
                p += m.precision;
                r += m.recall;
                f += m.f1;
            }
            ClassReport {
                class_id: c,
                name: name.clone(),
                num_gt: matched.num_gt(c),
                ap: aps.as_ref().map(|a| a.iter().sum::<f64>() / nt),
                ap50: aps.as_ref().map(|a| a[0]),
                precision: p / nt,
                recall: r / nt,
                f1: f / nt,
            }
        })
        .collect();

    let included: Vec<&ClassReport> = classes
        .iter()
        .filter(|c| opts.zero_gt_as_zero || c.ap.is_some())
        .collect();
    let n = included.len() as f64;
    let mean = |f: &dyn Fn(&ClassReport) -> f64| included.iter().map(|c| f(c)).sum::<f64>() / n;
    let summary = Summary {
        map: mean(&|c| c.ap.unwrap_or(0.0)),
        mp: mean(&|c| c.precision),
        mr: mean(&|c| c.recall),
        mf1: mean(&|c| c.f1),
    };
    Ok(MapReport { classes, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn gt(x: f64, class_id: usize) -> Annotation {
        Annotation {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id,
            image_id: "i".into(),
        }
    }

    fn det(x: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id,
            score,
        }
    }

    #[test]
    fn thresholds_are_ten() {
        let t = iou_thresholds();
        assert_eq!(t.len(), 10);
        assert!((t[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_all_tp() {
        let gts = vec![gt(0.0, 0), gt(20.0, 1)];
        let dets = vec![det(0.0, 1.0, 0), det(20.0, 1.0, 1)];
        let m = match_image(&dets, &gts, &iou_thresholds());
        for t in 0..10 {
            assert_eq!(m.counts(None, t, 0.0), Counts { tp: 2, fp: 0, fn_: 0 });
        }
    }

    #[test]
    fn no_detections_all_fn() {
        let gts = vec![gt(0.0, 0), gt(20.0, 0)];
        let m = match_image(&[], &gts, &[0.5]);
        let c = m.counts(None, 0, 0.0);
        assert_eq!(c, Counts { tp: 0, fp: 0, fn_: 2 });
        let prf = c.pr_f1();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_detection_is_fp() {
        // IoU 0.9 at higher score, then IoU 0.8.
        let g = Annotation {
            bbox: BBox::new(0.0, 0.0, 100.0, 10.0),
            class_id: 0,
            image_id: "i".into(),
        };
        let d1 = Detection {
            bbox: BBox::new(0.0, 0.0, 90.0, 10.0),
            class_id: 0,
            score: 0.9,
        };
        let d2 = Detection {
            bbox: BBox::new(0.0, 0.0, 80.0, 10.0),
            class_id: 0,
            score: 0.8,
        };
        assert!((iou(&d1.bbox, &g.bbox) - 0.9).abs() < 1e-12);
        assert!((iou(&d2.bbox, &g.bbox) - 0.8).abs() < 1e-12);
        let m = match_image(&[d2, d1], &[g], &[0.5]);
        let by_score: Vec<(f64, bool)> = m.detections.iter().map(|d| (d.score, d.tp[0])).collect();
        assert_eq!(by_score, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn prf1_arithmetic() {
        let p = Counts { tp: 5, fp: 0, fn_: 0 }.pr_f1();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = Counts { tp: 3, fp: 1, fn_: 2 }.pr_f1();
        assert_eq!(p.precision, 0.75);
        assert_eq!(p.recall, 0.6);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Counts { tp: 0, fp: 4, fn_: 3 }.pr_f1().f1, 0.0);
    }

    #[test]
    fn five_ninths_fixture() {
        let curve = PRCurve::from_sorted_flags(0, 0.5, &[(0.9, true), (0.8, false), (0.7, true)], 3);
        assert_eq!(curve.points, vec![(1.0 / 3.0, 1.0), (1.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0)]);
        let ap = average_precision(&curve).unwrap();
        assert!((ap - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn tied_scores_form_one_point() {
        let c = PRCurve::from_sorted_flags(0, 0.5, &[(0.5, false), (0.5, true)], 1);
        assert_eq!(c.points, vec![(1.0, 0.5)]);
    }

    #[test]
    fn empty_gt_class_is_undefined() {
        let c = PRCurve::from_sorted_flags(0, 0.5, &[(0.5, false)], 0);
        assert_eq!(average_precision(&c), None);
    }

    #[test]
    fn map_excludes_or_zeroes_empty_classes() {
        let names = vec!["a".to_string(), "b".to_string()];
        let gts = BTreeMap::from([("i".to_string(), vec![gt(0.0, 0)])]);
        let dets = BTreeMap::from([("i".to_string(), vec![det(0.0, 0.9, 0)])]);
        let r = map_metric(&dets, &gts, &names, EvalOptions::default()).unwrap();
        assert_eq!(r.summary.map, 1.0);
        assert_eq!(r.classes[1].ap, None);
        let strict = EvalOptions {
            zero_gt_as_zero: true,
            ..Default::default()
        };
        let r = map_metric(&dets, &gts, &names, strict).unwrap();
        assert_eq!(r.summary.map, 0.5);
    }

    #[test]
    fn map_without_gt_errors() {
        let names = vec!["a".to_string()];
        assert!(map_metric(&BTreeMap::new(), &BTreeMap::new(), &names, EvalOptions::default()).is_err());
    }
}
