//! Named gradient-check scenarios on small random inputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{csp_block, spp_block, BackboneConfig, CspWeights, Network, SppWeights};
use crate::difficulty::{ds_image, DifficultyScore};
use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox};
use crate::loss::{dwfl, focal, heatmap_focal, total_loss, LossConfig};
use crate::targets::{render_pyramid, GaussianSpec};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Conv,
    Maxpool,
    Focal,
    Dwfl,
    Heatmap,
    Csp,
    Spp,
    /// Image -> network -> difficulty score -> total loss.
    Pipeline,
}

impl GradTarget {
    pub const ALL: [GradTarget; 8] = [
        GradTarget::Conv,
        GradTarget::Maxpool,
        GradTarget::Focal,
        GradTarget::Dwfl,
        GradTarget::Heatmap,
        GradTarget::Csp,
        GradTarget::Spp,
        GradTarget::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Conv => "conv",
            GradTarget::Maxpool => "maxpool",
            GradTarget::Focal => "focal",
            GradTarget::Dwfl => "dwfl",
            GradTarget::Heatmap => "heatmap",
            GradTarget::Csp => "csp",
            GradTarget::Spp => "spp",
            GradTarget::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown grad-check target `{s}`")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// One-hot `[n, c]` labels.
fn one_hot(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let mut y = Tensor::zeros(&[n, c]);
    for i in 0..n {
        y.set(&[i, rng.random_range(0..c)], 1.0);
    }
    y
}

/// Run the scenario `target` with inputs drawn from `seed`.
pub fn run_grad_check(target: GradTarget, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        GradTarget::Conv => {
            let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[3], -1.0, 1.0);
            let x = uniform(&mut rng, &[1, 2, 5, 6], -1.0, 1.0);
            let stride = rng.random_range(1..=2);
            grad_check(
                |t: &mut Tape, x: Var| {
                    let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                    let y = t.conv2d(x, w, b, stride, 1)?;
                    let y = t.silu(y);
                    Ok(t.sum(y))
                },
                &x,
                eps,
            )
        }
        GradTarget::Maxpool => {
            let x = uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
            grad_check(
                |t: &mut Tape, x: Var| {
                    let y = t.maxpool2d(x, 3, 1, 1)?;
                    let y = t.pow(y, 2.0);
                    Ok(t.sum(y))
                },
                &x,
                eps,
            )
        }
        GradTarget::Focal | GradTarget::Dwfl => {
            let (n, c) = (6, 4);
            let p = uniform(&mut rng, &[n, c], 0.05, 0.95);
            let y = one_hot(&mut rng, n, c);
            let alpha: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
            let ds = DifficultyScore::from_levels([rng.random_range(0.1..2.0); 3]);
            let weighted = target == GradTarget::Dwfl;
            grad_check(
                |t: &mut Tape, p: Var| {
                    if weighted {
                        dwfl(t, &ds, 1e-3, p, &y, &alpha, 2.0)
                    } else {
                        focal(t, p, &y, &alpha, 2.0)
                    }
                },
                &p,
                eps,
            )
        }
        GradTarget::Heatmap => {
            let shape = [1, 2, 5, 5];
            let p = uniform(&mut rng, &shape, 0.05, 0.95);
            let mut tgt = uniform(&mut rng, &shape, 0.0, 0.9);
            tgt.set(&[0, 0, 2, 2], 1.0);
            tgt.set(&[0, 1, 4, 0], 1.0);
            let weights = [0.3, 0.6];
            grad_check(
                |t: &mut Tape, p: Var| heatmap_focal(t, p, &tgt, 2.0, 4.0, Some(&weights)),
                &p,
                eps,
            )
        }
        GradTarget::Csp => {
            let weights = CspWeights::random(4, seed)?;
            let x = uniform(&mut rng, &[1, 4, 5, 5], -1.0, 1.0);
            grad_check(
                |t: &mut Tape, x: Var| {
                    let y = csp_block(t, x, &weights)?;
                    Ok(t.sum(y))
                },
                &x,
                eps,
            )
        }
        GradTarget::Spp => {
            let weights = SppWeights::random(2, &[3, 5], seed);
            let x = uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
            grad_check(
                |t: &mut Tape, x: Var| {
                    let y = spp_block(t, x, &weights)?;
                    let y = t.pow(y, 2.0);
                    Ok(t.sum(y))
                },
                &x,
                eps,
            )
        }
        GradTarget::Pipeline => pipeline_check(&mut rng, seed, eps),
    }
}

/// Gradient of the total loss with respect to the input image. The
/// difficulty score is a detached weight, so it is computed once at the
/// base image and held fixed while the image is perturbed.
fn pipeline_check(rng: &mut ChaCha8Rng, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let num_classes = 2;
    let net = Network::new(BackboneConfig {
        base_channels: 2,
        head_channels: 4,
        num_classes,
        spp_kernels: vec![3, 5],
        seed,
        init_gain: 3.0,
        ..Default::default()
    })?;
    let side = 32;
    let image = uniform(rng, &[1, 3, side, side], 0.0, 1.0);
    let anns: Vec<Annotation> = (0..rng.random_range(1..=3))
        .map(|_| {
            let s = rng.random_range(6.0..14.0);
            let (x, y) = (rng.random_range(0.0..side as f64 - s), rng.random_range(0.0..side as f64 - s));
            Annotation {
                bbox: BBox::new(x, y, x + s, y + s),
                class_id: rng.random_range(0..num_classes),
                image_id: "check".into(),
            }
        })
        .collect();
    let targets = render_pyramid(&anns, side, side, num_classes, GaussianSpec::default())?;
    let alpha = [0.3, 0.6];
    let cfg = LossConfig::default();

    let ds = {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let params = net.bind(&mut tape);
        let levels = net.forward_vars(&mut tape, x, &params)?;
        let raw: Vec<&Tensor> = levels.iter().map(|l| tape.value(l.raw)).collect();
        ds_image(&raw)?
    };
    grad_check(
        |t: &mut Tape, x: Var| {
            let params: Vec<Var> = net.params().iter().map(|p| t.constant(p.clone())).collect();
            let levels = net.forward_vars(t, x, &params)?;
            let preds = levels.map(|l| l.heads);
            Ok(total_loss(t, &preds, &targets, &ds, &alpha, &cfg)?.total)
        },
        &image,
        eps,
    )
}
