use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    /// Upward isosceles triangle filling its box.
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub name: String,
    pub shape: Shape,
    /// Relative sampling frequency.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.08
}

fn default_gap() -> u32 {
    1
}

fn default_prefix() -> String {
    "synth".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// Square side in pixels, a multiple of 32.
    pub image_size: u32,
    /// Inclusive range.
    pub objects_per_image: [usize; 2],
    /// Inclusive range of object side lengths in pixels.
    pub object_size: [u32; 2],
    pub classes: Vec<ClassShape>,
    pub seed: u64,
    /// Half-width of the uniform per-pixel background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Minimum free pixels between two objects.
    #[serde(default = "default_gap")]
    pub gap: u32,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

const PLACEMENT_ATTEMPTS: usize = 500;
const LAYOUT_RESTARTS: usize = 20;
const SUPERSAMPLE: u32 = 4;

impl SyntheticSpec {
    /// 64x64 images with 1 to 10 discs and squares of 10 to 18 px.
    pub fn discs_vs_squares(num_images: usize, seed: u64) -> Self {
        Self {
            num_images,
            image_size: 64,
            objects_per_image: [1, 10],
            object_size: [10, 18],
            classes: vec![
                ClassShape {
                    name: "disc".into(),
                    shape: Shape::Disc,
                    weight: 1.0,
                },
                ClassShape {
                    name: "square".into(),
                    shape: Shape::Square,
                    weight: 1.0,
                },
            ],
            seed,
            noise: default_noise(),
            gap: default_gap(),
            id_prefix: default_prefix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!("image size {} is not a positive multiple of 32", self.image_size));
        }
        let [smin, smax] = self.object_size;
        if smin < 4 || smin > smax || smax > self.image_size {
            return bad(format!(
                "object size range [{smin}, {smax}] must satisfy 4 <= min <= max <= {}",
                self.image_size
            ));
        }
        let [nmin, nmax] = self.objects_per_image;
        if nmin > nmax {
            return bad(format!("object count range [{nmin}, {nmax}] is empty"));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.classes.iter().any(|c| !(c.weight.is_finite() && c.weight > 0.0)) {
            return bad("class weights must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Generated images in dataset order.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub images: Vec<RgbImage>,
}

impl SynthOutput {
    /// Write `<id>.png` per image and `dataset.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        par::try_map(&self.dataset.images.iter().zip(&self.images).collect::<Vec<_>>(), |(rec, img)| {
            let path = dir.join(&rec.file);
            img.save(&path).map_err(|source| Error::Image { path, source })
        })?;
        self.dataset.save(dir.join("dataset.json"))
    }
}

struct Placed {
    bbox: BBox,
    class: usize,
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x2 + gap <= b.x1 || b.x2 + gap <= a.x1 || a.y2 + gap <= b.y1 || b.y2 + gap <= a.y1
}

fn layout(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, index: usize) -> Result<Vec<Placed>> {
    let classes = WeightedIndex::new(spec.classes.iter().map(|c| c.weight))
        .map_err(|e| Error::Config(format!("class weights: {e}")))?;
    let n = rng.random_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);
    let gap = f64::from(spec.gap);
    for _ in 0..LAYOUT_RESTARTS {
        let mut placed: Vec<Placed> = Vec::with_capacity(n);
        for _ in 0..n {
            let class = classes.sample(rng);
            let side = rng.random_range(spec.object_size[0]..=spec.object_size[1]);
            let free = spec.image_size - side;
            let spot = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let x = f64::from(rng.random_range(0..=free));
                let y = f64::from(rng.random_range(0..=free));
                let s = f64::from(side);
                let b = BBox::new(x, y, x + s, y + s);
                placed.iter().all(|p| separated(&p.bbox, &b, gap)).then_some(b)
            });
            match spot {
                Some(bbox) => placed.push(Placed { bbox, class }),
                None => break,
            }
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(Error::InfeasiblePacking {
        image: index,
        wanted: n,
        attempts: LAYOUT_RESTARTS * PLACEMENT_ATTEMPTS,
    })
}

fn inside(shape: Shape, b: &BBox, x: f64, y: f64) -> bool {
    match shape {
        Shape::Square => x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2,
        Shape::Disc => {
            let (cx, cy) = b.center();
            let r = b.width() / 2.0;
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            if y < b.y1 || y >= b.y2 {
                return false;
            }
            let (cx, _) = b.center();
            let half = b.width() / 2.0 * (y - b.y1) / b.height();
            (x - cx).abs() <= half
        }
    }
}

fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, objects: &[Placed]) -> RgbImage {
    let size = spec.image_size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.35));
    let mut px: Vec<[f64; 3]> = (0..size * size)
        .map(|_| std::array::from_fn(|c| (base[c] + rng.random_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0)))
        .collect();
    let step = 1.0 / f64::from(SUPERSAMPLE);
    for obj in objects {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let shape = spec.classes[obj.class].shape;
        let b = &obj.bbox;
        for py in b.y1 as u32..(b.y2.ceil() as u32).min(size) {
            for pxx in b.x1 as u32..(b.x2.ceil() as u32).min(size) {
                let mut hits = 0u32;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = f64::from(pxx) + (f64::from(sx) + 0.5) * step;
                        let y = f64::from(py) + (f64::from(sy) + 0.5) * step;
                        hits += u32::from(inside(shape, b, x, y));
                    }
                }
                let cov = f64::from(hits) / f64::from(SUPERSAMPLE * SUPERSAMPLE);
                let p = &mut px[(py * size + pxx) as usize];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - cov) + colour[c] * cov;
                }
            }
        }
    }
    RgbImage::from_fn(size, size, |x, y| {
        let p = px[(y * size + x) as usize];
        Rgb(p.map(|v| (v * 255.0).round() as u8))
    })
}

/// Generate `spec.num_images` images of non-overlapping shapes with exact
/// boxes. Image `i` draws from its own ChaCha stream, so output does not
/// depend on thread count.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let generated = par::try_map(&(0..spec.num_images).collect::<Vec<_>>(), |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let objects = layout(spec, &mut rng, i)?;
        let img = render(spec, &mut rng, &objects);
        Ok::<_, Error>((objects, img))
    })?;

    let mut ds = Dataset {
        classes: spec.class_names(),
        ..Default::default()
    };
    let mut images = Vec::with_capacity(spec.num_images);
    for (i, (objects, img)) in generated.into_iter().enumerate() {
        let id = format!("{}_{i:05}", spec.id_prefix);
        for o in &objects {
            ds.annotations.push(AnnotationRecord {
                image_id: id.clone(),
                class: spec.classes[o.class].name.clone(),
                bbox: o.bbox,
            });
        }
        ds.images.push(ImageRecord {
            file: format!("{id}.png"),
            id,
            width: spec.image_size,
            height: spec.image_size,
            origin: None,
        });
        images.push(img);
    }
    Ok(SynthOutput { dataset: ds, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_within_bounds() {
        let spec = SyntheticSpec::discs_vs_squares(6, 3);
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert_eq!(a.dataset.to_json_string(), b.dataset.to_json_string());
        assert_eq!(a.images, b.images);
        for ann in &a.dataset.annotations {
            assert!(ann.bbox.is_within(64.0, 64.0));
            assert!(ann.bbox.width() >= 10.0 && ann.bbox.width() <= 18.0);
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        let out = synthesize(&SyntheticSpec::discs_vs_squares(10, 1)).unwrap();
        let by = out.dataset.annotations_by_image().unwrap();
        for anns in by.values() {
            for (i, a) in anns.iter().enumerate() {
                for b in &anns[i + 1..] {
                    assert!(separated(&a.bbox, &b.bbox, 1.0));
                }
            }
        }
    }

    #[test]
    fn object_pixels_brighter_than_background() {
        let out = synthesize(&SyntheticSpec::discs_vs_squares(1, 9)).unwrap();
        let a = &out.dataset.annotations[0];
        let (cx, cy) = a.bbox.center();
        let centre = out.images[0].get_pixel(cx as u32, cy as u32);
        assert!(centre.0.iter().all(|&v| v >= 150));
    }

    #[test]
    fn infeasible_packing_errors() {
        let mut spec = SyntheticSpec::discs_vs_squares(1, 0);
        spec.objects_per_image = [30, 30];
        spec.object_size = [20, 20];
        assert!(matches!(synthesize(&spec), Err(Error::InfeasiblePacking { .. })));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticSpec::discs_vs_squares(1, 0);
        spec.image_size = 50;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::discs_vs_squares(1, 0);
        spec.object_size = [2, 8];
        assert!(spec.validate().is_err());
    }
}
