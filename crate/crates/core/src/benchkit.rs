//! Synthetic workloads for comparing peak decoding against greedy NMS.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{propose, LevelMaps, DEFAULT_PROPOSALS, DEFAULT_SCORE_FLOOR};
use crate::geometry::{BBox, Detection};
use crate::nms::greedy_nms;
use crate::tensor::Tensor;

/// A one-level, one-class heatmap of `side x side` cells with `objects`
/// Gaussian blobs at random cells, plus matching size/offset maps.
pub fn synthetic_level(side: usize, objects: usize, seed: u64) -> LevelMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heat = Tensor::from_fn(&[1, side, side], |_| rng.random_range(0.0..0.005));
    for _ in 0..objects {
        let (cx, cy) = (rng.random_range(0..side), rng.random_range(0..side));
        let peak: f64 = rng.random_range(0.3..1.0);
        for y in cy.saturating_sub(2)..(cy + 3).min(side) {
            for x in cx.saturating_sub(2)..(cx + 3).min(side) {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                let v = peak * (-d2 / 2.0).exp();
                let o = heat.offset(&[0, y, x]);
                heat.data_mut()[o] = heat.data()[o].max(v);
            }
        }
    }
    let size = Tensor::from_fn(&[2, side, side], |_| rng.random_range(4.0..32.0));
    let offset = Tensor::from_fn(&[2, side, side], |_| rng.random_range(0.0..1.0));
    LevelMaps {
        stride: 8,
        heat,
        size,
        offset,
    }
}

/// `n` scored boxes of one class scattered over a square whose area grows
/// with `n`, so overlaps stay rare and NMS does its full pairwise scan.
pub fn synthetic_proposals(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = 40.0 * (n as f64).sqrt().max(1.0);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
            let (w, h) = (rng.random_range(8.0..24.0), rng.random_range(8.0..24.0));
            Detection {
                bbox: BBox::new(x, y, x + w, y + h),
                class_id: 0,
                score: rng.random_range(0.0..1.0),
            }
        })
        .collect()
}

/// Median wall time in seconds of `reps` runs of `f`.
pub fn median_seconds<T>(reps: usize, mut f: impl FnMut() -> T) -> f64 {
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    /// Heatmap side for decoding; 0 for NMS.
    pub side: usize,
    /// Objects drawn into the heatmap, or NMS proposals.
    pub count: usize,
    pub seconds: f64,
}

pub fn time_decode(side: usize, objects: usize, reps: usize, seed: u64) -> BenchRow {
    let level = synthetic_level(side, objects, seed);
    let extent = (side * 8) as f64;
    let levels = std::slice::from_ref(&level);
    let seconds = median_seconds(reps, || propose(levels, DEFAULT_PROPOSALS, DEFAULT_SCORE_FLOOR, extent, extent));
    BenchRow {
        method: "peak_decode",
        side,
        count: objects,
        seconds,
    }
}

pub fn time_nms(n: usize, reps: usize, seed: u64) -> BenchRow {
    let proposals = synthetic_proposals(n, seed);
    let seconds = median_seconds(reps, || greedy_nms(&proposals, 0.5));
    BenchRow {
        method: "greedy_nms",
        side: 0,
        count: n,
        seconds,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
