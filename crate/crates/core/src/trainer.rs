//! Deterministic SGD training of the toy detector.
//!
//! Each step takes the next `batch_size` images of a seeded per-epoch
//! shuffle, computes every image's difficulty-weighted loss and gradient on
//! its own tape (in parallel), averages the gradients in batch order and
//! applies one SGD update. The reduction order is fixed, so the loss curve
//! is bitwise identical for a given seed whatever the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::data::{load_image, pad_to_multiple, rgb_to_tensor, Dataset, SynthOutput};
use crate::difficulty::{ds_image, DifficultyScore, DEFAULT_DS_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::Annotation;
use crate::loss::{alpha_table, LossConfig, LossValues, DEFAULT_BETA, DEFAULT_GAMMA};
use crate::par;
use crate::targets::{render_pyramid, GaussianSpec, HeatmapTarget};
use crate::tensor::{Tape, Tensor};

/// Init gain for toy runs. At gain 1 the difficulty score starts below the
/// floor and the loss barely moves.
pub const TOY_INIT_GAIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub ds_floor: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Lower bound on each class's alpha weight.
    pub alpha_floor: f64,
    pub lambda_size: f64,
    pub lambda_off: f64,
    pub neg_beta: f64,
    pub min_overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 0.3,
            momentum: 0.5,
            seed: 0,
            ds_floor: DEFAULT_DS_FLOOR,
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            alpha_floor: 0.3,
            lambda_size: loss.lambda_size,
            lambda_off: loss.lambda_off,
            neg_beta: loss.neg_beta,
            min_overlap: GaussianSpec::default().min_overlap,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            neg_beta: self.neg_beta,
            lambda_size: self.lambda_size,
            lambda_off: self.lambda_off,
            ds_floor: self.ds_floor,
        }
    }
}

/// One training image with its pre-rendered targets.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    /// `[3, H, W]`, H and W multiples of 32
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    pub targets: Vec<HeatmapTarget>,
}

#[derive(Clone, Debug)]
pub struct TrainSet {
    pub class_names: Vec<String>,
    pub items: Vec<TrainItem>,
}

impl TrainSet {
    pub fn from_synth(out: &SynthOutput, spec: GaussianSpec) -> Result<Self> {
        let by_image = out.dataset.annotations_by_image()?;
        let pairs: Vec<_> = out.dataset.images.iter().zip(&out.images).collect();
        let nc = out.dataset.classes.len();
        let items = par::try_map(&pairs, |(rec, img)| {
            item(rec.id.clone(), rgb_to_tensor(img), by_image[&rec.id].clone(), nc, spec)
        })?;
        Self::new(out.dataset.classes.clone(), items)
    }

    /// Load every image of `ds` from disk (relative to `root`), padding to
    /// multiples of 32.
    pub fn from_dataset(ds: &Dataset, root: &Path, spec: GaussianSpec) -> Result<Self> {
        let by_image = ds.annotations_by_image()?;
        let nc = ds.classes.len();
        let items = par::try_map(&ds.images, |rec| {
            let image = pad_to_multiple(&load_image(root, rec)?, 32);
            item(rec.id.clone(), image, by_image[&rec.id].clone(), nc, spec)
        })?;
        Self::new(ds.classes.clone(), items)
    }

    fn new(class_names: Vec<String>, items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(Self { class_names, items })
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.class_names.len()];
        for a in self.items.iter().flat_map(|i| &i.annotations) {
            counts[a.class_id] += 1;
        }
        counts
    }
}

fn item(id: String, image: Tensor, annotations: Vec<Annotation>, nc: usize, spec: GaussianSpec) -> Result<TrainItem> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let targets = render_pyramid(&annotations, w, h, nc, spec)?;
    Ok(TrainItem {
        id,
        image,
        annotations,
        targets,
    })
}

/// One row of the loss curve: batch means of each loss component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub heat: f64,
    pub size: f64,
    pub offset: f64,
    /// Mean unclamped difficulty score of the batch.
    pub mean_ds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DsRecord {
    pub step: usize,
    pub image_id: String,
    pub ds: DifficultyScore,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub curve: Vec<StepRecord>,
    pub ds_log: Vec<DsRecord>,
    /// Alpha weights the heat loss used, per class.
    pub alpha_weights: Vec<f64>,
}

struct ImageStep {
    values: LossValues,
    ds: DifficultyScore,
    grads: Vec<Vec<f64>>,
}

/// Loss, difficulty score and parameter gradients for one image.
fn image_step(net: &Network, item: &TrainItem, alpha: &[f64], cfg: &LossConfig, step: usize) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, &item.image)?;
    let raw: Vec<&Tensor> = fwd.levels.iter().map(|l| tape.value(l.raw)).collect();
    let ds = ds_image(&raw)?;
    let report = crate::loss::total_loss(&mut tape, &fwd.predictions(), &item.targets, &ds, alpha, cfg)?;
    let values = report.values(&tape);
    for (component, v) in [
        ("heat", values.heat),
        ("size", values.size),
        ("offset", values.offset),
        ("total", values.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { step, component });
        }
    }
    tape.backward(report.total)?;
    let grads = fwd
        .params
        .iter()
        .map(|&p| match tape.grad(p) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(p).len()],
        })
        .collect();
    Ok(ImageStep { values, ds, grads })
}

/// The per-epoch shuffled image order for `steps * batch` draws.
fn batch_schedule(n: usize, steps: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(steps * batch + n);
    while order.len() < steps * batch {
        let mut epoch: Vec<usize> = (0..n).collect();
        epoch.shuffle(&mut rng);
        order.extend(epoch);
    }
    order.chunks(batch).take(steps).map(<[usize]>::to_vec).collect()
}

/// Train `net` on `set`. `on_step` sees each loss-curve row as it is produced.
pub fn train(
    set: &TrainSet,
    mut net: Network,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net.cfg.num_classes != set.class_names.len() {
        return Err(Error::Config(format!(
            "network has {} classes, dataset {}",
            net.cfg.num_classes,
            set.class_names.len()
        )));
    }
    let alpha = alpha_table(&set.class_counts(), cfg.beta)?;
    let alpha_weights = alpha.weights(cfg.alpha_floor);
    let loss_cfg = cfg.loss_config();
    let schedule = batch_schedule(set.items.len(), cfg.steps, cfg.batch_size, cfg.seed);

    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut ds_log = Vec::with_capacity(cfg.steps * cfg.batch_size);
    for (step, batch) in schedule.iter().enumerate() {
        let results = par::try_map(batch, |&i| image_step(&net, &set.items[i], &alpha_weights, &loss_cfg, step))?;
        let inv = 1.0 / batch.len() as f64;
        let mut row = StepRecord {
            step,
            total: 0.0,
            heat: 0.0,
            size: 0.0,
            offset: 0.0,
            mean_ds: 0.0,
        };
        for (r, &i) in results.iter().zip(batch) {
            row.total += r.values.total * inv;
            row.heat += r.values.heat * inv;
            row.size += r.values.size * inv;
            row.offset += r.values.offset * inv;
            row.mean_ds += r.ds.value * inv;
            ds_log.push(DsRecord {
                step,
                image_id: set.items[i].id.clone(),
                ds: r.ds,
            });
        }
        for (pi, (param, vel)) in net.params_mut().iter_mut().zip(&mut velocity).enumerate() {
            for (j, (w, v)) in param.data_mut().iter_mut().zip(vel.iter_mut()).enumerate() {
                let g: f64 = results.iter().map(|r| r.grads[pi][j]).sum::<f64>() * inv;
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
        }
        on_step(&row);
        curve.push(row);
    }
    Ok(TrainOutcome {
        network: net,
        curve,
        ds_log,
        alpha_weights,
    })
}

/// Write the loss curve as CSV: step, total, heat, size, offset, mean_ds.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in curve {
        w.serialize(row).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
