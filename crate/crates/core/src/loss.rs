//! Class-frequency weights, focal losses, and the difficulty-weighted
//! detection loss.

use serde::{Deserialize, Serialize};

use crate::difficulty::DifficultyScore;
use crate::error::{Error, Result};
use crate::targets::HeatmapTarget;
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_BETA: f64 = 0.6;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    E,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "10")]
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::E => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }
}

impl std::str::FromStr for LogBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e" | "ln" => Ok(LogBase::E),
            "2" => Ok(LogBase::Two),
            "10" => Ok(LogBase::Ten),
            other => Err(Error::Config(format!(
                "unknown log base `{other}` (expected e, 2 or 10)"
            ))),
        }
    }
}

/// Per-class weights from min-max normalised negative log frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub class_counts: Vec<u64>,
    pub alpha_prime: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub log_base: LogBase,
}

impl AlphaTable {
    /// Weights lifted to at least `floor`.
    pub fn weights(&self, floor: f64) -> Vec<f64> {
        self.alpha.iter().map(|&a| a.max(floor)).collect()
    }
}

/// Natural-log alpha table.
pub fn alpha_table(class_counts: &[u64], beta: f64) -> Result<AlphaTable> {
    alpha_table_in_base(class_counts, beta, LogBase::E)
}

/// `a'_c = -log(n_c / N)`, `a_c = beta * (a'_c - min a') / (max a' - min a')`.
///
/// When every count is equal the range collapses and all classes get
/// `beta / 2`.
pub fn alpha_table_in_base(class_counts: &[u64], beta: f64, base: LogBase) -> Result<AlphaTable> {
    if class_counts.len() < 2 {
        return Err(Error::Config(format!(
            "alpha table needs at least 2 classes, got {}",
            class_counts.len()
        )));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Config(format!("beta must be finite and >= 0, got {beta}")));
    }
    if let Some(i) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroCount(format!("#{i}")));
    }
    let total: u64 = class_counts.iter().sum();
    let alpha_prime: Vec<f64> = class_counts
        .iter()
        .map(|&n| -base.log(n as f64 / total as f64))
        .collect();

    let min_count = class_counts.iter().min().copied().unwrap_or(0);
    let max_count = class_counts.iter().max().copied().unwrap_or(0);
    let alpha = if min_count == max_count {
        vec![beta / 2.0; class_counts.len()]
    } else {
        let lo = alpha_prime.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = alpha_prime.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        alpha_prime
            .iter()
            .map(|&a| (beta * (a - lo) / (hi - lo)).clamp(0.0, beta))
            .collect()
    };
    Ok(AlphaTable {
        class_counts: class_counts.to_vec(),
        alpha_prime,
        alpha,
        beta,
        log_base: base,
    })
}

fn weight_var(tape: &mut Tape, like: Var, values: Vec<f64>) -> Result<Var> {
    let shape = tape.value(like).shape().to_vec();
    Ok(tape.constant(Tensor::new(shape, values)?))
}

/// Focal loss over `[N, C]` class probabilities `p` with one-hot `y`:
/// mean over rows of `alpha_t * (1 - p_t)^gamma * CE(p, y)`.
pub fn focal(tape: &mut Tape, p: Var, y: &Tensor, alpha: &[f64], gamma: f64) -> Result<Var> {
    let pt = tape.value(p);
    let [n, c] = *pt.shape() else {
        return Err(Error::InvalidShape {
            shape: pt.shape().to_vec(),
            reason: "focal expects [N, C] probabilities".into(),
        });
    };
    if y.shape() != pt.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal (probabilities vs targets)",
            lhs: pt.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if alpha.len() != c {
        return Err(Error::ShapeMismatch {
            op: "focal (classes vs alpha)",
            lhs: vec![c],
            rhs: vec![alpha.len()],
        });
    }
    // Only the true-class entry of each row survives the one-hot weight,
    // so the elementwise sum equals the per-row p_t form.
    let w: Vec<f64> = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| t * alpha[i % c])
        .collect();
    let w = weight_var(tape, p, w)?;
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = tape.one_minus(pc);
    let modulator = tape.pow(one_minus, gamma);
    let logp = tape.log(pc);
    let ce = tape.scale(logp, -1.0);
    let term = tape.mul(modulator, ce)?;
    let weighted = tape.mul(term, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / n.max(1) as f64))
}

/// Difficulty-weighted focal loss: `max(ds, ds_floor) * focal`, with the
/// difficulty weight held constant.
#[allow(clippy::too_many_arguments)]
pub fn dwfl(
    tape: &mut Tape,
    ds: &DifficultyScore,
    ds_floor: f64,
    p: Var,
    y: &Tensor,
    alpha: &[f64],
    gamma: f64,
) -> Result<Var> {
    let fl = focal(tape, p, y, alpha, gamma)?;
    Ok(tape.scale(fl, ds.clamped(ds_floor)))
}

/// Penalty-reduced pixelwise focal loss on heat probabilities.
///
/// Positive cells (target == 1) contribute `(1 - p)^gamma log p`; all other
/// cells contribute `(1 - t)^neg_beta p^gamma log(1 - p)`. The negated sum
/// is divided by the number of positive cells (at least 1). With
/// `channel_weights`, each class channel is scaled by its weight; the
/// channel axis is the third from last.
pub fn heatmap_focal(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    gamma: f64,
    neg_beta: f64,
    channel_weights: Option<&[f64]>,
) -> Result<Var> {
    let (sum, npos) = heatmap_focal_sum(tape, pred, target, gamma, neg_beta, channel_weights)?;
    Ok(tape.scale(sum, -1.0 / npos.max(1) as f64))
}

/// Unnormalised positive + negative log terms and the positive count.
fn heatmap_focal_sum(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    gamma: f64,
    neg_beta: f64,
    channel_weights: Option<&[f64]>,
) -> Result<(Var, usize)> {
    let pv = tape.value(pred);
    if pv.len() != target.len() || pv.shape().last() != target.shape().last() {
        return Err(Error::ShapeMismatch {
            op: "heatmap_focal (prediction vs target)",
            lhs: pv.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let channel_of: Box<dyn Fn(usize) -> f64> = match channel_weights {
        None => Box::new(|_| 1.0),
        Some(ws) => {
            let s = target.shape();
            if s.len() < 3 || s[s.len() - 3] != ws.len() {
                return Err(Error::ShapeMismatch {
                    op: "heatmap_focal (channels vs weights)",
                    lhs: s.to_vec(),
                    rhs: vec![ws.len()],
                });
            }
            let plane = s[s.len() - 2] * s[s.len() - 1];
            let c = ws.len();
            Box::new(move |i| ws[(i / plane) % c])
        }
    };

    let mut npos = 0;
    let mut pos_w = Vec::with_capacity(target.len());
    let mut neg_w = Vec::with_capacity(target.len());
    for (i, &t) in target.data().iter().enumerate() {
        let cw = channel_of(i);
        if t == 1.0 {
            npos += 1;
            pos_w.push(cw);
            neg_w.push(0.0);
        } else {
            pos_w.push(0.0);
            neg_w.push(cw * (1.0 - t).powf(neg_beta));
        }
    }
    let pos_w = weight_var(tape, pred, pos_w)?;
    let neg_w = weight_var(tape, pred, neg_w)?;

    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let q = tape.one_minus(p);
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let q_g = tape.pow(q, gamma);
    let p_g = tape.pow(p, gamma);

    let pos = tape.mul(q_g, log_p)?;
    let pos = tape.mul(pos, pos_w)?;
    let neg = tape.mul(p_g, log_q)?;
    let neg = tape.mul(neg, neg_w)?;
    let both = tape.add(pos, neg)?;
    Ok((tape.sum(both), npos))
}

/// Sum of `|pred - target|` over both channels at cells where `mask` is 1.
pub fn l1_masked(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let pv = tape.value(pred);
    let plane = mask.len();
    if pv.len() != target.len() || plane == 0 || !target.len().is_multiple_of(plane) {
        return Err(Error::ShapeMismatch {
            op: "l1_masked",
            lhs: pv.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let shape = pv.shape().to_vec();
    let reps = target.len() / plane;
    let m: Vec<f64> = (0..reps).flat_map(|_| mask.data().iter().copied()).collect();
    let t = tape.constant(Tensor::new(shape.clone(), target.data().to_vec())?);
    let m = tape.constant(Tensor::new(shape, m)?);
    let diff = tape.sub(pred, t)?;
    let a = tape.abs(diff);
    let masked = tape.mul(a, m)?;
    Ok(tape.sum(masked))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// Exponent on `(1 - t)` for negative heat cells.
    pub neg_beta: f64,
    pub lambda_size: f64,
    pub lambda_off: f64,
    pub ds_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            neg_beta: 4.0,
            lambda_size: 0.1,
            lambda_off: 1.0,
            ds_floor: crate::difficulty::DEFAULT_DS_FLOOR,
        }
    }
}

/// Network outputs of one level as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction {
    /// Heat logits, `[1, C, H, W]`
    pub heat_logits: Var,
    /// `[1, 2, H, W]`
    pub size: Var,
    /// `[1, 2, H, W]`
    pub offset: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub total: Var,
    pub heat: Var,
    pub size: Var,
    pub offset: Var,
    pub ds_weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub heat: f64,
    pub size: f64,
    pub offset: f64,
    pub ds_weight: f64,
}

impl LossReport {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            heat: tape.value(self.heat).item(),
            size: tape.value(self.size).item(),
            offset: tape.value(self.offset).item(),
            ds_weight: self.ds_weight,
        }
    }
}

/// Per-image detection loss:
/// `max(ds, floor) * (sum_l heat_l + lambda_size * L1_size + lambda_off * L1_offset)`.
///
/// Each level's heat term is normalised by that level's positive count;
/// the L1 terms are averaged over all centre cells of the image.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[LevelPrediction],
    targets: &[HeatmapTarget],
    ds: &DifficultyScore,
    alpha: &[f64],
    cfg: &LossConfig,
) -> Result<LossReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Config(format!(
            "{} prediction levels vs {} target levels",
            preds.len(),
            targets.len()
        )));
    }
    let mut heat_terms = Vec::with_capacity(preds.len());
    let mut size_terms = Vec::with_capacity(preds.len());
    let mut off_terms = Vec::with_capacity(preds.len());
    let mut npos_total = 0;
    for (pred, tgt) in preds.iter().zip(targets) {
        let prob = tape.sigmoid(pred.heat_logits);
        heat_terms.push(heatmap_focal(
            tape,
            prob,
            &tgt.heat,
            cfg.gamma,
            cfg.neg_beta,
            Some(alpha),
        )?);
        size_terms.push(l1_masked(tape, pred.size, &tgt.size, &tgt.mask)?);
        off_terms.push(l1_masked(tape, pred.offset, &tgt.offset, &tgt.mask)?);
        npos_total += tgt.num_positive();
    }
    let heat = sum_vars(tape, &heat_terms)?;
    let norm = 1.0 / npos_total.max(1) as f64;
    let size = sum_vars(tape, &size_terms)?;
    let size = tape.scale(size, norm);
    let offset = sum_vars(tape, &off_terms)?;
    let offset = tape.scale(offset, norm);

    let ws = tape.scale(size, cfg.lambda_size);
    let wo = tape.scale(offset, cfg.lambda_off);
    let inner = tape.add(heat, ws)?;
    let inner = tape.add(inner, wo)?;
    let ds_weight = ds.clamped(cfg.ds_floor);
    let total = tape.scale(inner, ds_weight);
    Ok(LossReport {
        total,
        heat,
        size,
        offset,
        ds_weight,
    })
}

fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}
