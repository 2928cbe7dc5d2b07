//! Per-image difficulty score: the mean SiLU activation of each pyramid
//! level's raw features, averaged over the three levels.
//!
//! The score is a plain number. It weights the loss as a constant and never
//! carries gradient back into the network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DS_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    /// Scores of the stride 8, 16 and 32 levels.
    pub per_level: [f64; 3],
    pub value: f64,
}

impl DifficultyScore {
    pub fn from_levels(per_level: [f64; 3]) -> Self {
        Self {
            per_level,
            value: per_level.iter().sum::<f64>() / 3.0,
        }
    }

    /// Score used as a loss weight, lifted to at least `floor`.
    pub fn clamped(&self, floor: f64) -> f64 {
        self.value.max(floor)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    if x >= 0.0 {
        x / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        x * e / (1.0 + e)
    }
}

/// Mean of `silu(f)` over every element of one level's raw features.
pub fn ds_level(features: &Tensor) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::InvalidShape {
            shape: features.shape().to_vec(),
            reason: "difficulty score of an empty feature map".into(),
        });
    }
    let total: f64 = features.data().iter().map(|&x| silu(x)).sum();
    Ok(total / features.len() as f64)
}

/// Combine the three pyramid levels into one image score.
pub fn ds_image(levels: &[&Tensor]) -> Result<DifficultyScore> {
    let [a, b, c] = levels else {
        return Err(Error::Config(format!(
            "difficulty score needs exactly 3 levels, got {}",
            levels.len()
        )));
    };
    Ok(DifficultyScore::from_levels([
        ds_level(a)?,
        ds_level(b)?,
        ds_level(c)?,
    ]))
}
