//! A small differentiable detector: CSP-style stages, an SPP block at the
//! deepest level, a top-down path with lateral concatenations, and
//! heat/size/offset heads on three levels (strides 8, 16, 32).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{propose, LevelMaps};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::loss::LevelPrediction;
use crate::tensor::{Tape, Tensor, Var};

/// Heat head bias, `-ln((1 - 0.1) / 0.1)`: initial probability about 0.1.
pub const HEAT_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub csp_split_ratio: f64,
    pub spp_kernels: Vec<usize>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Weights are drawn uniformly from `±init_gain / sqrt(fan_in)`.
    #[serde(default = "unit_gain")]
    pub init_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            csp_split_ratio: 0.5,
            spp_kernels: vec![5, 9, 13],
            head_channels: 32,
            num_classes: 2,
            seed: 0,
            init_gain: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "base_channels must be even and positive, got {}",
                self.base_channels
            )));
        }
        if self.csp_split_ratio != 0.5 {
            return Err(Error::Config("only a 0.5 CSP split is supported".into()));
        }
        if let Some(k) = self.spp_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("SPP kernel {k} must be odd")));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::Config(format!("init_gain must be positive, got {}", self.init_gain)));
        }
        if self.head_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("head_channels and num_classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameter layout and values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: BackboneConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// One pyramid level of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub stride: u32,
    /// Pre-activation level features fed to the difficulty score.
    pub raw: Var,
    pub heads: LevelPrediction,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Tape variables of the parameters, in [`Network::names`] order.
    pub params: Vec<Var>,
    pub levels: [LevelVars; 3],
}

impl Forward {
    pub fn predictions(&self) -> [LevelPrediction; 3] {
        self.levels.map(|l| l.heads)
    }
}

struct Layout<'a> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    cfg: &'a BackboneConfig,
}

impl Layout<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.names.push(format!("{name}.w"));
        self.shapes.push(vec![cout, cin, k, k]);
        self.names.push(format!("{name}.b"));
        self.shapes.push(vec![cout]);
    }

    fn build(mut self) -> (Vec<String>, Vec<Vec<usize>>) {
        let c = self.cfg.base_channels;
        let h = self.cfg.head_channels;
        let spp_in = 2 * c * (1 + self.cfg.spp_kernels.len());
        self.conv("stem1", 3, c, 3);
        self.conv("stem2", c, c, 3);
        for (name, cin, cout) in [("s8", c, c), ("s16", c, 2 * c), ("s32", 2 * c, 2 * c)] {
            self.conv(&format!("{name}.down"), cin, cout, 3);
            self.conv(&format!("{name}.csp.a"), cout / 2, cout / 2, 3);
            self.conv(&format!("{name}.csp.b"), cout / 2, cout / 2, 3);
            self.conv(&format!("{name}.csp.fuse"), cout, cout, 1);
        }
        self.conv("spp.fuse", spp_in, 2 * c, 1);
        self.conv("lat32", 2 * c, h, 1);
        self.conv("td16", h + 2 * c, h, 3);
        self.conv("td8", h + c, h, 3);
        for level in ["p8", "p16", "p32"] {
            self.conv(&format!("{level}.trunk"), h, h, 3);
            self.conv(&format!("{level}.heat"), h, self.cfg.num_classes, 1);
            self.conv(&format!("{level}.size"), h, 2, 1);
            self.conv(&format!("{level}.offset"), h, 2, 1);
        }
        (self.names, self.shapes)
    }
}

/// Binds parameter names to tape variables during a forward pass.
struct Ctx<'a> {
    net: &'a Network,
    vars: &'a [Var],
}

impl Ctx<'_> {
    fn conv(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.vars[self.net.index[&format!("{name}.w")]];
        let b = self.vars[self.net.index[&format!("{name}.b")]];
        let k = tape.value(w).shape()[2];
        tape.conv2d(x, w, b, stride, k / 2)
    }

    fn conv_act(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(tape, name, x, stride)?;
        Ok(tape.silu(y))
    }
}

impl Network {
    /// Fresh network with weights uniform in `±1/sqrt(fan_in)`, biases zero
    /// except the heat head prior.
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let (names, shapes) = Layout {
            names: vec![],
            shapes: vec![],
            cfg: &cfg,
        }
        .build();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    let v = if name.ends_with("heat.b") {
                        HEAT_PRIOR_BIAS
                    } else {
                        0.0
                    };
                    Tensor::full(shape, v)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = cfg.init_gain / (fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Self::from_parts(cfg, names, params)
    }

    fn from_parts(cfg: BackboneConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            cfg,
            names,
            params,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Record all parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Forward an image `[3, H, W]` (H, W divisible by 32).
    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<Forward> {
        let [3, h, w] = *image.shape() else {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "expected a [3, H, W] image".into(),
            });
        };
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "height and width must be multiples of 32; pad the image".into(),
            });
        }
        let x = tape.constant(image.clone().reshape(&[1, 3, h, w])?);
        let params = self.bind(tape);
        let levels = self.forward_vars(tape, x, &params)?;
        Ok(Forward { params, levels })
    }

    /// Forward from an input variable with already-bound parameters.
    pub fn forward_vars(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<[LevelVars; 3]> {
        let ctx = Ctx {
            net: self,
            vars: params,
        };
        let x = ctx.conv_act(tape, "stem1", x, 2)?;
        let x = ctx.conv_act(tape, "stem2", x, 2)?;

        let x = ctx.conv_act(tape, "s8.down", x, 2)?;
        let d8 = csp_block_named(&ctx, tape, "s8.csp", x)?;
        let x = ctx.conv_act(tape, "s16.down", d8, 2)?;
        let d16 = csp_block_named(&ctx, tape, "s16.csp", x)?;
        let x = ctx.conv_act(tape, "s32.down", d16, 2)?;
        let x = csp_block_named(&ctx, tape, "s32.csp", x)?;
        let d32 = spp_block_named(&ctx, tape, "spp", x, &self.cfg.spp_kernels)?;

        let raw32 = ctx.conv(tape, "lat32", d32, 1)?;
        let a32 = tape.silu(raw32);
        let up = tape.upsample_nearest(a32, 2)?;
        let cat = tape.concat_channels(&[up, d16])?;
        let raw16 = ctx.conv(tape, "td16", cat, 1)?;
        let a16 = tape.silu(raw16);
        let up = tape.upsample_nearest(a16, 2)?;
        let cat = tape.concat_channels(&[up, d8])?;
        let raw8 = ctx.conv(tape, "td8", cat, 1)?;
        let a8 = tape.silu(raw8);

        let mut level = |name: &str, stride: u32, raw: Var, act: Var| -> Result<LevelVars> {
            let t = ctx.conv_act(tape, &format!("{name}.trunk"), act, 1)?;
            let heat_logits = ctx.conv(tape, &format!("{name}.heat"), t, 1)?;
            let size = ctx.conv(tape, &format!("{name}.size"), t, 1)?;
            // Sizes are regressed in cells and reported in pixels.
            let size = tape.scale(size, f64::from(stride));
            let offset = ctx.conv(tape, &format!("{name}.offset"), t, 1)?;
            Ok(LevelVars {
                stride,
                raw,
                heads: LevelPrediction {
                    heat_logits,
                    size,
                    offset,
                },
            })
        };
        Ok([
            level("p8", 8, raw8, a8)?,
            level("p16", 16, raw16, a16)?,
            level("p32", 32, raw32, a32)?,
        ])
    }

    /// Inference: per-level heat probabilities and regression maps, plus
    /// the raw level features.
    pub fn predict(&self, image: &Tensor) -> Result<(Vec<LevelMaps>, [Tensor; 3])> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, image)?;
        let mut maps = Vec::with_capacity(3);
        for l in &fwd.levels {
            let prob = tape.sigmoid(l.heads.heat_logits);
            maps.push(LevelMaps {
                stride: l.stride,
                heat: squeeze(tape.value(prob))?,
                size: squeeze(tape.value(l.heads.size))?,
                offset: squeeze(tape.value(l.heads.offset))?,
            });
        }
        let raw = fwd.levels.map(|l| tape.value(l.raw).clone());
        Ok((maps, raw))
    }

    /// Peak-decoded detections for one image, best `k` over all levels.
    pub fn detect(&self, image: &Tensor, k: usize, score_floor: f64) -> Result<Vec<Detection>> {
        let (maps, _) = self.predict(image)?;
        let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        Ok(propose(&maps, k, score_floor, w, h)?.0)
    }

    /// Write `<stem>.bin` (all parameters, little-endian f64, in order) and
    /// `<stem>.json` (names, shapes, config, seed).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bin = path.as_ref().with_extension("bin");
        let manifest_path = path.as_ref().with_extension("json");
        let bytes: Vec<u8> = self.params.iter().flat_map(Tensor::to_le_bytes).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = CheckpointManifest {
            format: "heatdet-checkpoint-v1".into(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bin = path.as_ref().with_extension("bin");
        let manifest_path = path.as_ref().with_extension("json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;

        let fresh = Network::new(manifest.config.clone())?;
        let expected: Vec<(&String, &[usize])> = fresh
            .names
            .iter()
            .zip(fresh.params.iter().map(Tensor::shape))
            .collect();
        let got: Vec<(&String, &[usize])> = manifest
            .params
            .iter()
            .map(|p| (&p.name, p.shape.as_slice()))
            .collect();
        if expected != got {
            return Err(Error::Data(format!(
                "{}: parameter layout does not match its config",
                manifest_path.display()
            )));
        }
        let mut params = Vec::with_capacity(got.len());
        let mut at = 0;
        for entry in &manifest.params {
            let n: usize = entry.shape.iter().product::<usize>() * 8;
            let chunk = bytes.get(at..at + n).ok_or_else(|| {
                Error::Data(format!("{}: truncated parameter buffer", bin.display()))
            })?;
            params.push(Tensor::from_le_bytes(entry.shape.clone(), chunk)?);
            at += n;
        }
        if at != bytes.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes",
                bin.display(),
                bytes.len() - at
            )));
        }
        Self::from_parts(manifest.config, fresh.names, params)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    seed: u64,
    config: BackboneConfig,
    params: Vec<ParamEntry>,
}

fn squeeze(t: &Tensor) -> Result<Tensor> {
    t.clone().reshape(&t.shape()[1..])
}

fn csp_block_named(ctx: &Ctx<'_>, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
    let c = tape.value(x).shape()[1];
    if !c.is_multiple_of(2) {
        return Err(Error::InvalidShape {
            shape: tape.value(x).shape().to_vec(),
            reason: "CSP block needs an even channel count".into(),
        });
    }
    let keep = tape.slice_channels(x, 0, c / 2)?;
    let part = tape.slice_channels(x, c / 2, c / 2)?;
    let part = ctx.conv_act(tape, &format!("{name}.a"), part, 1)?;
    let part = ctx.conv_act(tape, &format!("{name}.b"), part, 1)?;
    let cat = tape.concat_channels(&[keep, part])?;
    ctx.conv_act(tape, &format!("{name}.fuse"), cat, 1)
}

fn spp_block_named(ctx: &Ctx<'_>, tape: &mut Tape, name: &str, x: Var, kernels: &[usize]) -> Result<Var> {
    let mut branches = vec![x];
    for &k in kernels {
        branches.push(tape.maxpool2d(x, k, 1, k / 2)?);
    }
    let cat = tape.concat_channels(&branches)?;
    ctx.conv_act(tape, &format!("{name}.fuse"), cat, 1)
}

/// Weights of a standalone CSP block over `channels` inputs.
#[derive(Clone, Debug)]
pub struct CspWeights {
    pub a: (Tensor, Tensor),
    pub b: (Tensor, Tensor),
    pub fuse: (Tensor, Tensor),
}

impl CspWeights {
    pub fn random(channels: usize, seed: u64) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::Config(format!(
                "CSP block needs an even channel count, got {channels}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = channels / 2;
        Ok(Self {
            a: random_conv(&mut rng, h, h, 3),
            b: random_conv(&mut rng, h, h, 3),
            fuse: random_conv(&mut rng, channels, channels, 1),
        })
    }
}

/// Weights of a standalone SPP block.
#[derive(Clone, Debug)]
pub struct SppWeights {
    pub kernels: Vec<usize>,
    pub fuse: (Tensor, Tensor),
}

impl SppWeights {
    pub fn random(channels: usize, kernels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            kernels: kernels.to_vec(),
            fuse: random_conv(&mut rng, channels * (1 + kernels.len()), channels, 1),
        }
    }
}

fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-bound..bound));
    let b = Tensor::from_fn(&[cout], |_| rng.random_range(-bound..bound));
    (w, b)
}

fn conv_pair(tape: &mut Tape, x: Var, (w, b): &(Tensor, Tensor), act: bool) -> Result<Var> {
    let w = tape.constant(w.clone());
    let b = tape.constant(b.clone());
    let k = tape.value(w).shape()[2];
    let y = tape.conv2d(x, w, b, 1, k / 2)?;
    Ok(if act { tape.silu(y) } else { y })
}

/// Cross-stage partial block: split channels in half, run one half through
/// two 3x3 conv + SiLU layers, concatenate with the untouched half, fuse
/// with a 1x1 conv + SiLU. Output shape equals input shape.
pub fn csp_block(tape: &mut Tape, x: Var, weights: &CspWeights) -> Result<Var> {
    let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
    if c % 2 != 0 || c == 0 {
        return Err(Error::InvalidShape {
            shape: tape.value(x).shape().to_vec(),
            reason: "CSP block needs an even channel count".into(),
        });
    }
    let keep = tape.slice_channels(x, 0, c / 2)?;
    let part = tape.slice_channels(x, c / 2, c / 2)?;
    let part = conv_pair(tape, part, &weights.a, true)?;
    let part = conv_pair(tape, part, &weights.b, true)?;
    let cat = tape.concat_channels(&[keep, part])?;
    conv_pair(tape, cat, &weights.fuse, true)
}

/// Spatial pyramid pooling: concatenate the input with stride-1,
/// same-padded max-pools of each kernel size, then 1x1 conv + SiLU back to
/// the input channel count.
pub fn spp_block(tape: &mut Tape, x: Var, weights: &SppWeights) -> Result<Var> {
    let mut branches = vec![x];
    for &k in &weights.kernels {
        branches.push(tape.maxpool2d(x, k, 1, k / 2)?);
    }
    let cat = tape.concat_channels(&branches)?;
    conv_pair(tape, cat, &weights.fuse, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            base_channels: 4,
            head_channels: 4,
            num_classes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn level_shapes_for_256() {
        let net = Network::new(small_cfg()).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::full(&[3, 256, 256], 0.5);
        let fwd = net.forward(&mut tape, &img).unwrap();
        let dims: Vec<_> = fwd
            .levels
            .iter()
            .map(|l| tape.value(l.heads.heat_logits).shape()[2..].to_vec())
            .collect();
        assert_eq!(dims, vec![vec![32, 32], vec![16, 16], vec![8, 8]]);
        assert_eq!(tape.value(fwd.levels[0].heads.size).shape(), &[1, 2, 32, 32]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = Network::new(small_cfg()).unwrap();
        let mut tape = Tape::new();
        let err = net
            .forward(&mut tape, &Tensor::zeros(&[3, 48, 64]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn odd_base_channels_rejected() {
        let cfg = BackboneConfig {
            base_channels: 5,
            ..small_cfg()
        };
        assert!(Network::new(cfg).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let a = Network::new(small_cfg()).unwrap();
        let b = Network::new(small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = Network::new(BackboneConfig {
            seed: 1,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(small_cfg()).unwrap();
        net.save(dir.path().join("model")).unwrap();
        let back = Network::load(dir.path().join("model")).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn csp_zero_input_is_finite_and_shape_preserving() {
        let w = CspWeights::random(6, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 5, 7]));
        let y = csp_block(&mut tape, x, &w).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 6, 5, 7]);
        assert!(v.data().iter().all(|x| x.is_finite()));
        assert!(CspWeights::random(5, 0).is_err());
    }

    #[test]
    fn spp_constant_input_branches_agree() {
        let w = SppWeights::random(2, &[5, 9, 13], 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.3));
        for k in [5, 9, 13] {
            let p = tape.maxpool2d(x, k, 1, k / 2).unwrap();
            assert_eq!(tape.value(p), tape.value(x));
        }
        let y = spp_block(&mut tape, x, &w).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 4, 4]);
    }
}
