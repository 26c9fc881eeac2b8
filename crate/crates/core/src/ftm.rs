//! Teacher-side feature transformation.
//!
//! `|FFT|` over the tapped feature, a centered Gaussian band mask, mean
//! pooling, and a flatten to `(B, N, C)`. There are no parameters and no
//! gradient: the output is a plain [`Tensor`] used as a fixed target.

use crate::error::{Error, Result};
use crate::feature::{Source, StageFeature};
use crate::layout::Layout;
use crate::spectral::{self, avg_downsample, build_mask, MaskParams};
use crate::tensor::Tensor;

/// Per-stage transformation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FtmConfig {
    pub mask: MaskParams,
    pub pool_factor: usize,
    /// When false the feature stays in the spatial domain (no transform, no
    /// mask); pooling and flattening still apply.
    pub use_fft: bool,
    pub use_filter: bool,
}

impl Default for FtmConfig {
    fn default() -> Self {
        Self {
            mask: MaskParams::default(),
            pool_factor: 2,
            use_fft: true,
            use_filter: true,
        }
    }
}

impl FtmConfig {
    /// `(N, C)` of the output for a teacher feature of `shape`.
    pub fn output_extents(&self, shape: &[usize], layout: Layout) -> Result<(usize, usize)> {
        layout.check_rank(shape)?;
        let shape = if self.use_fft {
            spectral::padded_shape(shape, layout)
        } else {
            shape.to_vec()
        };
        let mut tokens = 1;
        for &a in layout.transformed_axes() {
            if shape[a] % self.pool_factor != 0 {
                return Err(Error::invalid(format!(
                    "pool factor {} does not divide extent {} of {shape:?}",
                    self.pool_factor, shape[a]
                )));
            }
            tokens *= shape[a] / self.pool_factor;
        }
        Ok((tokens, shape[layout.channel_axis()]))
    }
}

/// Unified teacher representation for one stage, `(B, N, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FtmOutput {
    pub tensor: Tensor,
    pub stage: usize,
}

/// Grid `(B, C, H, W)` to tokens `(B, H*W, C)`.
pub fn flatten_grid(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    Layout::Grid.check_rank(&s)?;
    x.permute(&[0, 2, 3, 1])?.reshape([s[0], s[2] * s[3], s[1]])
}

pub fn ftm_forward(f: &StageFeature<'_>, cfg: &FtmConfig) -> Result<FtmOutput> {
    if f.source != Source::Teacher {
        return Err(Error::contract("FTM only transforms teacher features"));
    }
    let x = f.var.value();
    f.layout.check_rank(x.shape())?;
    let freq = if cfg.use_fft {
        let mag = spectral::centered_magnitude(&x, f.layout)?;
        if cfg.use_filter {
            let extents: Vec<usize> = f
                .layout
                .transformed_axes()
                .iter()
                .map(|&a| mag.shape()[a])
                .collect();
            spectral::apply_mask(&mag, &build_mask(&extents, cfg.mask)?)?
        } else {
            mag
        }
    } else {
        (*x).clone()
    };
    let pooled = avg_downsample(&freq, f.layout, cfg.pool_factor)?;
    let tensor = match f.layout {
        Layout::Seq => pooled,
        Layout::Grid => flatten_grid(&pooled)?,
    };
    Ok(FtmOutput {
        tensor,
        stage: f.stage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tape;

    fn teacher<'t>(tape: &'t Tape, x: Tensor, layout: Layout) -> StageFeature<'t> {
        StageFeature::new(tape.constant(x), layout, 1, Source::Teacher).unwrap()
    }

    #[test]
    fn grid_shape_arithmetic() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(1);
        let f = teacher(&tape, Tensor::randn([1, 2, 8, 8], &mut rng), Layout::Grid);
        let out = ftm_forward(&f, &FtmConfig::default()).unwrap();
        assert_eq!(out.tensor.shape(), &[1, 16, 2]);
        assert!(out.tensor.data().iter().all(|v| *v >= 0.0));
        assert_eq!(
            FtmConfig::default().output_extents(&[1, 2, 8, 8], Layout::Grid).unwrap(),
            (16, 2)
        );
    }

    #[test]
    fn constant_grid_hand_dft() {
        // 2x2 constant c: DC = 4c, all other bins 0; centered DC sits at (1, 1)
        let c = 1.5;
        let tape = Tape::new();
        let f = teacher(&tape, Tensor::full([1, 1, 2, 2], c), Layout::Grid);
        let cfg = FtmConfig {
            use_filter: false,
            pool_factor: 1,
            ..FtmConfig::default()
        };
        let out = ftm_forward(&f, &cfg).unwrap();
        assert_eq!(out.tensor.shape(), &[1, 4, 1]);
        let d = out.tensor.data();
        assert!(d[..3].iter().all(|v| v.abs() < 1e-12));
        assert!((d[3] - c * 4.0).abs() < 1e-12);

        let pooled = ftm_forward(&f, &FtmConfig { pool_factor: 2, ..cfg }).unwrap();
        assert!((pooled.tensor.data()[0] - c).abs() < 1e-12);
    }

    #[test]
    fn disabled_filter_and_pool_is_plain_composition() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn([2, 3, 4, 8], &mut rng);
        let f = teacher(&tape, x.clone(), Layout::Grid);
        let cfg = FtmConfig {
            use_filter: false,
            pool_factor: 1,
            ..FtmConfig::default()
        };
        let out = ftm_forward(&f, &cfg).unwrap();
        let spec = spectral::center_shift(spectral::fft_forward(&x, Layout::Grid).unwrap()).unwrap();
        let expect = flatten_grid(&spectral::magnitude(&spec)).unwrap();
        assert_eq!(out.tensor.data(), expect.data());
    }

    #[test]
    fn student_input_rejected() {
        let tape = Tape::new();
        let f = StageFeature::new(tape.constant(Tensor::zeros([1, 4, 2])), Layout::Seq, 2, Source::Student)
            .unwrap();
        assert!(matches!(
            ftm_forward(&f, &FtmConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn channel_permutation_equivariance() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(9);
        let x = Tensor::randn([1, 8, 3], &mut rng);
        let perm = [2usize, 0, 1];
        let xp = Tensor::from_fn([1, 8, 3], |i| x.at(&[i[0], i[1], perm[i[2]]]));
        let cfg = FtmConfig::default();
        let a = ftm_forward(&teacher(&tape, x, Layout::Seq), &cfg).unwrap().tensor;
        let b = ftm_forward(&teacher(&tape, xp, Layout::Seq), &cfg).unwrap().tensor;
        let ap = Tensor::from_fn(a.shape().to_vec(), |i| a.at(&[i[0], i[1], perm[i[2]]]));
        assert_eq!(ap, b);
    }

    #[test]
    fn spatial_arm_skips_transform() {
        let tape = Tape::new();
        let x = Tensor::from_fn([1, 4, 2], |i| (i[1] * 2 + i[2]) as f64 - 3.0);
        let cfg = FtmConfig {
            use_fft: false,
            ..FtmConfig::default()
        };
        let out = ftm_forward(&teacher(&tape, x, Layout::Seq), &cfg).unwrap();
        assert_eq!(out.tensor.data(), &[-2.0, -1.0, 2.0, 3.0]);
    }
}
