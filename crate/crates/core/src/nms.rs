//! Reference greedy IoU non-maximum suppression, used only as the
//! comparison baseline for peak-equality decoding.

use crate::geometry::{iou, Detection};

/// Keep the highest-scoring box, drop every same-class box overlapping it
/// by more than `iou_threshold`, repeat. Quadratic in the proposal count.
pub fn greedy_nms(proposals: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score));
    let mut suppressed = vec![false; proposals.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        let keep = &proposals[i];
        kept.push(keep.clone());
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && proposals[j].class_id == keep.class_id
                && iou(&keep.bbox, &proposals[j].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn d(x: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id,
            score,
        }
    }

    #[test]
    fn suppresses_overlaps_within_class() {
        let kept = greedy_nms(&[d(0.0, 0.5, 0), d(1.0, 0.9, 0), d(1.0, 0.4, 1), d(50.0, 0.3, 0)], 0.5);
        let scores: Vec<f64> = kept.iter().map(|k| k.score).collect();
        assert_eq!(scores, vec![0.9, 0.4, 0.3]);
    }

    #[test]
    fn empty_input() {
        assert!(greedy_nms(&[], 0.5).is_empty());
    }
}
