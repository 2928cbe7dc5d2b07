//! Target rendering and peak decoding against independent oracles.

use heatdet::decoder::{decode, extract_peaks};
use heatdet::geometry::{iou, Annotation, BBox};
use heatdet::targets::{gaussian_radius, render, GaussianSpec};
use heatdet::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest r in [0, hi] with `ok(r)`, for `ok` true at 0 and monotone.
fn bisect(ok: impl Fn(f64) -> bool, hi: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn radius_oracle(w: f64, h: f64, o: f64) -> f64 {
    // Corners shifted together.
    let shifted = |r: f64| {
        let inter = (w - r).max(0.0) * (h - r).max(0.0);
        inter / (2.0 * w * h - inter)
    };
    // Box shrunk by r on every side.
    let shrunk = |r: f64| (w - 2.0 * r).max(0.0) * (h - 2.0 * r).max(0.0) / (w * h);
    // Box grown by r on every side.
    let grown = |r: f64| w * h / ((w + 2.0 * r) * (h + 2.0 * r));
    let hi = w.max(h) * 4.0;
    bisect(|r| shifted(r) >= o, hi)
        .min(bisect(|r| shrunk(r) >= o, hi))
        .min(bisect(|r| grown(r) >= o, hi))
}

proptest! {
    #[test]
    fn radius_matches_bisection(w in 0.5f64..200.0, h in 0.5f64..200.0, o in 0.1f64..0.95) {
        let got = gaussian_radius(w, h, o);
        let want = radius_oracle(w, h, o);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn render_is_max_of_single_renders(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anns: Vec<Annotation> = (0..4).map(|_| {
            let (cx, cy) = (rng.random_range(0.0..128.0), rng.random_range(0.0..128.0));
            Annotation {
                bbox: BBox::from_center(cx, cy, rng.random_range(8.0..60.0), rng.random_range(8.0..60.0)),
                class_id: rng.random_range(0..2),
                image_id: "i".into(),
            }
        }).collect();
        let spec = GaussianSpec::default();
        let all = render(&anns, 128, 128, 8, 2, spec).unwrap();
        let mut expect = Tensor::zeros(&[2, 16, 16]);
        for a in &anns {
            let one = render(std::slice::from_ref(a), 128, 128, 8, 2, spec).unwrap();
            for (e, v) in expect.data_mut().iter_mut().zip(one.heat.data()) {
                *e = e.max(*v);
            }
        }
        prop_assert_eq!(all.heat, expect);
    }
}

/// Every cell at or above `floor` that no in-bounds 8-neighbour exceeds.
fn local_maxima_oracle(heat: &Tensor, floor: f64) -> Vec<(usize, usize, usize)> {
    let [c, h, w] = *heat.shape() else { unreachable!() };
    let mut out = Vec::new();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = heat.get(&[ci, y, x]);
                if v < floor {
                    continue;
                }
                let mut is_max = true;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if (dy, dx) != (0, 0)
                            && ny >= 0
                            && nx >= 0
                            && (ny as usize) < h
                            && (nx as usize) < w
                            && heat.get(&[ci, ny as usize, nx as usize]) > v
                        {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    out.push((ci, y, x));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

#[test]
fn peaks_match_local_maxima_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for round in 0..300 {
        let (c, h, w) = (rng.random_range(1..3), rng.random_range(1..12), rng.random_range(1..12));
        // Coarse quantisation makes ties and plateaus common.
        let levels: f64 = if round % 2 == 0 { 4.0 } else { 1000.0 };
        let heat = Tensor::from_fn(&[c, h, w], |_| (rng.random_range(0.0..1.0) * levels).floor() / levels);
        let peaks = extract_peaks(&heat, usize::MAX, 0.01, 8).unwrap();
        let mut got: Vec<_> = peaks.peaks.iter().map(|p| (p.class_id, p.cell_y, p.cell_x)).collect();
        got.sort_unstable();
        assert_eq!(got, local_maxima_oracle(&heat, 0.01), "round {round}");
    }
}

#[test]
fn render_then_decode_recovers_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (side, stride) = (256usize, 8u32);
    let mut anns: Vec<Annotation> = Vec::new();
    let mut cells = std::collections::HashSet::new();
    while anns.len() < 20 {
        let (w, h) = (rng.random_range(8.0..40.0), rng.random_range(8.0..40.0));
        let (cx, cy) = (rng.random_range(w..side as f64 - w), rng.random_range(h..side as f64 - h));
        let cell = ((cx / 8.0) as usize, (cy / 8.0) as usize);
        // Keep centres at least two cells apart so no Gaussian hides another peak.
        if cells.iter().any(|&(x, y): &(usize, usize)| x.abs_diff(cell.0) <= 2 && y.abs_diff(cell.1) <= 2) {
            continue;
        }
        cells.insert(cell);
        anns.push(Annotation {
            bbox: BBox::from_center(cx, cy, w, h),
            class_id: 0,
            image_id: "i".into(),
        });
    }
    let t = render(&anns, side, side, stride, 1, GaussianSpec::default()).unwrap();
    let peaks = extract_peaks(&t.heat, 256, 0.5, stride).unwrap();
    let (dets, _) = decode(&peaks, &t.size, &t.offset, side as f64, side as f64).unwrap();
    assert_eq!(dets.len(), 20);
    for a in &anns {
        let best = dets.iter().map(|d| iou(&d.bbox, &a.bbox)).fold(0.0, f64::max);
        assert!(best >= 0.95, "{best}");
    }
}
