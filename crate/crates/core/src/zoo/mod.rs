//! Tiny four-stage backbones from three architecture families.
//!
//! * `CNN`: four 3x3 stride-2 convolutions with ReLU, global average pool,
//!   linear head. Stage taps are `GRID`.
//! * `ATTN`: patch embedding with learned positions, four pre-norm
//!   single-head attention blocks with a GELU MLP, final norm, mean-pool
//!   head. Stage taps are `SEQ`.
//! * `MLP`: patch embedding, four token-mixing plus channel-mixing blocks,
//!   final norm, mean-pool head. Stage taps are `SEQ`.
//!
//! When the width changes between stages of a token model, a linear
//! projection precedes the block.

mod attn;
mod cnn;
mod mixer;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::feature::{Source, StageFeature};
use crate::layout::Layout;
use crate::params::{Bindings, ParameterRegistry};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

pub const IN_CHANNELS: usize = 3;
pub const NUM_STAGES: usize = 4;
const LN_EPS: f64 = 1e-5;
/// Pixels in `[0, 1]` are mapped to `(x - INPUT_MEAN) / INPUT_STD` on entry.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Cnn,
    Attn,
    Mlp,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Cnn, Family::Attn, Family::Mlp];

    pub fn layout(self) -> Layout {
        match self {
            Family::Cnn => Layout::Grid,
            Family::Attn | Family::Mlp => Layout::Seq,
        }
    }

    fn code(self) -> f64 {
        match self {
            Family::Cnn => 0.0,
            Family::Attn => 1.0,
            Family::Mlp => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Family::Cnn),
            1 => Ok(Family::Attn),
            2 => Ok(Family::Mlp),
            _ => Err(Error::invalid(format!("unknown family code {c}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cnn => "CNN",
            Family::Attn => "ATTN",
            Family::Mlp => "MLP",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CNN" => Ok(Family::Cnn),
            "ATTN" => Ok(Family::Attn),
            "MLP" => Ok(Family::Mlp),
            _ => Err(Error::Config(format!("unknown model family `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub image_size: usize,
    pub stage_widths: [usize; NUM_STAGES],
    /// Patch edge for token models; ignored by `CNN`.
    pub patch_size: usize,
    pub num_classes: usize,
    /// Hidden expansion of the MLP sublayers (token models).
    pub mlp_ratio: usize,
}

impl ModelSpec {
    /// Desk-scale defaults used by the experiments: 32x32 inputs, patch 8.
    pub fn small(family: Family, num_classes: usize) -> Self {
        let stage_widths = match family {
            Family::Cnn => [8, 16, 24, 32],
            Family::Attn | Family::Mlp => [16, 16, 24, 24],
        };
        Self {
            family,
            image_size: 32,
            stage_widths,
            patch_size: 8,
            num_classes,
            mlp_ratio: 2,
        }
    }

    /// Wider variant used for teachers.
    pub fn teacher(family: Family, num_classes: usize) -> Self {
        let stage_widths = match family {
            Family::Cnn => [16, 32, 48, 64],
            Family::Attn | Family::Mlp => [32, 32, 48, 48],
        };
        Self {
            stage_widths,
            ..Self::small(family, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.stage_widths.contains(&0) || self.image_size == 0 {
            return Err(Error::invalid("zero width or image size"));
        }
        if self.family != Family::Cnn {
            if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                return Err(Error::invalid(format!(
                    "patch {} does not tile image {}",
                    self.patch_size, self.image_size
                )));
            }
            if self.mlp_ratio == 0 {
                return Err(Error::invalid("mlp_ratio must be positive"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        self.family.layout()
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    /// Tap shape of `stage` (1-based) for a batch of `batch` images.
    pub fn stage_shape(&self, stage: usize, batch: usize) -> Vec<usize> {
        let w = self.stage_widths[stage - 1];
        match self.family {
            Family::Cnn => {
                let mut s = self.image_size;
                for _ in 0..stage {
                    s = s.div_ceil(2);
                }
                vec![batch, w, s, s]
            }
            Family::Attn | Family::Mlp => vec![batch, self.tokens(), w],
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let w = &self.stage_widths;
        let k = self.num_classes;
        let head = w[3] * k + k;
        match self.family {
            Family::Cnn => {
                let mut prev = IN_CHANNELS;
                let mut n = 0;
                for &c in w {
                    n += 9 * prev * c + c;
                    prev = c;
                }
                n + head
            }
            Family::Attn | Family::Mlp => {
                let p = self.patch_size;
                let t = self.tokens();
                let r = self.mlp_ratio;
                let mut n = IN_CHANNELS * p * p * w[0] + w[0];
                if self.family == Family::Attn {
                    n += t * w[0];
                }
                for i in 0..NUM_STAGES {
                    let d = w[i];
                    if i > 0 && w[i - 1] != d {
                        n += w[i - 1] * d + d;
                    }
                    let mix = match self.family {
                        Family::Attn => 4 * (d * d + d),
                        _ => 2 * t * r * t + r * t + t,
                    };
                    n += 4 * d + mix + 2 * d * r * d + r * d + d;
                }
                n + 2 * w[3] + head
            }
        }
    }

    /// Flat numeric encoding stored alongside checkpoints.
    pub fn encode(&self) -> Tensor {
        let mut v = vec![self.family.code(), self.image_size as f64];
        v.extend(self.stage_widths.iter().map(|&w| w as f64));
        v.extend([self.patch_size as f64, self.num_classes as f64, self.mlp_ratio as f64]);
        Tensor::new([v.len()], v).expect("finite")
    }

    pub fn decode(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 9 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::invalid("malformed model spec record"));
        }
        let u = |i: usize| d[i] as usize;
        let spec = Self {
            family: Family::from_code(d[0])?,
            image_size: u(1),
            stage_widths: [u(2), u(3), u(4), u(5)],
            patch_size: u(6),
            num_classes: u(7),
            mlp_ratio: u(8),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Logits and the four stage taps of one forward pass.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    pub taps: [StageFeature<'t>; NUM_STAGES],
}

/// A backbone: its spec and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub registry: ParameterRegistry,
}

impl Model {
    pub fn init(spec: ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut r = ParameterRegistry::new();
        match spec.family {
            Family::Cnn => cnn::init(&spec, &mut r, rng)?,
            Family::Attn => attn::init(&spec, &mut r, rng)?,
            Family::Mlp => mixer::init(&spec, &mut r, rng)?,
        }
        Ok(Self { spec, registry: r })
    }

    /// Forward pass recording on `images`' tape. `source` tags the taps.
    pub fn forward_with_taps<'t>(
        &self,
        b: &Bindings<'t>,
        images: Var<'t>,
        source: Source,
    ) -> Result<ForwardOutput<'t>> {
        let s = &self.spec;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [IN_CHANNELS, s.image_size, s.image_size] {
            return Err(Error::shape(
                "model input",
                &shape,
                &[shape.first().copied().unwrap_or(0), IN_CHANNELS, s.image_size, s.image_size],
            ));
        }
        let images = images.offset(-INPUT_MEAN)?.scale(1.0 / INPUT_STD)?;
        let (logits, feats) = match s.family {
            Family::Cnn => cnn::forward(s, b, images)?,
            Family::Attn => attn::forward(s, b, images)?,
            Family::Mlp => mixer::forward(s, b, images)?,
        };
        let layout = s.layout();
        let mut taps = Vec::with_capacity(NUM_STAGES);
        for (i, f) in feats.into_iter().enumerate() {
            taps.push(StageFeature::new(f, layout, i + 1, source)?);
        }
        Ok(ForwardOutput {
            logits,
            taps: taps.try_into().map_err(|_| Error::contract("expected four taps"))?,
        })
    }

    /// Inference logits with every parameter held constant.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.registry.bind_frozen(&tape);
        let out = self.forward_with_taps(&b, tape.constant(images.clone()), Source::Teacher)?;
        Ok((*out.logits.value()).clone())
    }
}

fn layer_norm<'t>(x: Var<'t>, b: &Bindings<'t>, prefix: &str) -> Result<Var<'t>> {
    x.standardize(LN_EPS)?
        .mul(b.get(&format!("{prefix}.gamma"))?)?
        .add(b.get(&format!("{prefix}.beta"))?)
}

fn linear<'t>(x: Var<'t>, b: &Bindings<'t>, prefix: &str) -> Result<Var<'t>> {
    x.matmul(b.get(&format!("{prefix}.weight"))?)?
        .add(b.get(&format!("{prefix}.bias"))?)
}

fn insert_linear(r: &mut ParameterRegistry, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<()> {
    r.insert_uniform(format!("{prefix}.weight"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)?;
    r.insert_const(format!("{prefix}.bias"), &[fan_out], 0.0)
}

fn insert_norm(r: &mut ParameterRegistry, prefix: &str, width: usize) -> Result<()> {
    r.insert_const(format!("{prefix}.gamma"), &[width], 1.0)?;
    r.insert_const(format!("{prefix}.beta"), &[width], 0.0)
}

/// `(B, 3, H, W)` images to `(B, (H/p)*(W/p), 3*p*p)` patches.
fn patchify<'t>(x: Var<'t>, p: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, c, g) = (s[0], s[1], s[2] / p);
    x.reshape(&[b, c, g, p, g, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, g * g, c * p * p])
}

/// Patch embedding, then per stage an optional width projection and a block.
fn token_backbone<'t>(
    s: &ModelSpec,
    b: &Bindings<'t>,
    images: Var<'t>,
    block: impl Fn(Var<'t>, usize) -> Result<Var<'t>>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let mut x = linear(patchify(images, s.patch_size)?, b, "embed")?;
    if s.family == Family::Attn {
        x = x.add(b.get("pos")?)?;
    }
    let mut taps = Vec::with_capacity(NUM_STAGES);
    for i in 0..NUM_STAGES {
        if i > 0 && s.stage_widths[i - 1] != s.stage_widths[i] {
            x = linear(x, b, &format!("stage{}.proj", i + 1))?;
        }
        x = block(x, i + 1)?;
        taps.push(x.standardize(LN_EPS)?);
    }
    let pooled = layer_norm(x, b, "final_norm")?.mean(&[1])?;
    Ok((linear(pooled, b, "head")?, taps))
}

fn init_token_common(s: &ModelSpec, r: &mut ParameterRegistry, rng: &mut SeededRng) -> Result<()> {
    let w = &s.stage_widths;
    insert_linear(r, "embed", IN_CHANNELS * s.patch_size * s.patch_size, w[0], rng)?;
    for i in 1..NUM_STAGES {
        if w[i - 1] != w[i] {
            insert_linear(r, &format!("stage{}.proj", i + 1), w[i - 1], w[i], rng)?;
        }
    }
    insert_norm(r, "final_norm", w[3])?;
    insert_linear(r, "head", w[3], s.num_classes, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ModelSpec> {
        let mut v: Vec<ModelSpec> = Family::ALL.iter().map(|&f| ModelSpec::small(f, 10)).collect();
        v.extend(Family::ALL.iter().map(|&f| ModelSpec::teacher(f, 10)));
        v.push(ModelSpec {
            family: Family::Attn,
            image_size: 32,
            stage_widths: [8, 12, 12, 16],
            patch_size: 4,
            num_classes: 5,
            mlp_ratio: 3,
        });
        v.push(ModelSpec {
            family: Family::Mlp,
            image_size: 16,
            stage_widths: [6, 6, 10, 4],
            patch_size: 4,
            num_classes: 3,
            mlp_ratio: 2,
        });
        v
    }

    #[test]
    fn cnn_tap_shapes() {
        let spec = ModelSpec {
            stage_widths: [4, 8, 8, 16],
            ..ModelSpec::small(Family::Cnn, 10)
        };
        let m = Model::init(spec, &mut SeededRng::new(1)).unwrap();
        let tape = Tape::new();
        let b = m.registry.bind(&tape);
        let x = tape.constant(Tensor::zeros([2, 3, 32, 32]));
        let out = m.forward_with_taps(&b, x, Source::Student).unwrap();
        let got: Vec<Vec<usize>> = out.taps.iter().map(|t| t.shape()).collect();
        assert_eq!(
            got,
            vec![vec![2, 4, 16, 16], vec![2, 8, 8, 8], vec![2, 8, 4, 4], vec![2, 16, 2, 2]]
        );
        assert!(out.taps.iter().all(|t| t.layout == Layout::Grid));
        assert_eq!(out.logits.shape(), vec![2, 10]);
        assert!(out.logits.value().is_finite());
    }

    #[test]
    fn attn_patch4_gives_64_tokens() {
        let spec = ModelSpec {
            patch_size: 4,
            ..ModelSpec::small(Family::Attn, 10)
        };
        let m = Model::init(spec, &mut SeededRng::new(2)).unwrap();
        let tape = Tape::new();
        let b = m.registry.bind(&tape);
        let x = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        let out = m.forward_with_taps(&b, x, Source::Teacher).unwrap();
        for t in &out.taps {
            assert_eq!(t.shape()[1], 64);
            assert_eq!(t.layout, Layout::Seq);
        }
        assert!(out.logits.value().is_finite());
    }

    #[test]
    fn param_counts_match_closed_form() {
        for spec in specs() {
            let m = Model::init(spec.clone(), &mut SeededRng::new(3)).unwrap();
            assert_eq!(m.registry.param_count(), spec.param_count(), "{spec:?}");
            assert!(spec.param_count() <= 200_000);
        }
    }

    #[test]
    fn tap_shapes_match_spec_and_are_finite() {
        let mut rng = SeededRng::new(4);
        for spec in specs() {
            let m = Model::init(spec.clone(), &mut rng).unwrap();
            let tape = Tape::new();
            let b = m.registry.bind(&tape);
            let x = tape.constant(Tensor::uniform([2, 3, spec.image_size, spec.image_size], 0.0, 1.0, &mut rng));
            let out = m.forward_with_taps(&b, x, Source::Student).unwrap();
            for (i, t) in out.taps.iter().enumerate() {
                assert_eq!(t.shape(), spec.stage_shape(i + 1, 2));
                assert_eq!(t.stage, i + 1);
                assert!(t.layout.check_rank(&t.shape()).is_ok());
            }
            assert!(out.logits.value().is_finite());
        }
    }

    #[test]
    fn wrong_input_rejected() {
        let m = Model::init(ModelSpec::small(Family::Mlp, 4), &mut SeededRng::new(0)).unwrap();
        assert!(m.logits(&Tensor::zeros([1, 3, 16, 16])).is_err());
        assert!(m.logits(&Tensor::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn spec_codec_round_trip() {
        for spec in specs() {
            assert_eq!(ModelSpec::decode(&spec.encode()).unwrap(), spec);
        }
        assert!(ModelSpec::decode(&Tensor::zeros([3])).is_err());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = SeededRng::new(6);
        for spec in specs() {
            let m = Model::init(spec.clone(), &mut rng).unwrap();
            let tape = Tape::new();
            let b = m.registry.bind(&tape);
            let x = tape.constant(Tensor::uniform([2, 3, spec.image_size, spec.image_size], 0.0, 1.0, &mut rng));
            let out = m.forward_with_taps(&b, x, Source::Student).unwrap();
            let loss = out.logits.square().unwrap().sum_all().unwrap();
            let g = tape.backward(loss).unwrap();
            for (path, v) in b.iter() {
                let gv = g.get(v).unwrap_or_else(|| panic!("{} {path}: no grad", spec.family));
                assert!(gv.sum_of_squares() > 0.0, "{} {path}: zero grad", spec.family);
            }
        }
    }
}
