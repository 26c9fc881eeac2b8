//! Spectral primitives shared by the teacher transform and the student
//! adapter: FFT over the layout's transformed axes, magnitude spectra,
//! centering, Gaussian band masks and parameter-free average pooling.
//!
//! Padding policy: every transformed axis is zero-padded up to the next power
//! of two before the transform, so a `(B, 12, C)` sequence produces a
//! `(B, 16, C)` spectrum. Teacher and student go through the same rule, which
//! keeps their extents comparable.

pub mod dump;
pub mod fft;
mod mask;
mod pool;

pub use mask::{apply_mask, build_mask, normalized_distances, FrequencyMask, MaskParams};
pub use pool::avg_downsample;
pub(crate) use pool::PoolGeom;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::{numel, Tensor};

/// Complex spectrum of a feature block.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
    pub centered: bool,
    pub layout: Layout,
}

impl Spectrum {
    /// Transformed axes of `real`/`imag`.
    pub fn axes(&self) -> &'static [usize] {
        self.layout.transformed_axes()
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }
}

/// Shape after zero-padding the transformed axes.
pub fn padded_shape(shape: &[usize], layout: Layout) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &a in layout.transformed_axes() {
        out[a] = fft::padded_len(shape[a]);
    }
    out
}

/// Runs a 1-D FFT along `axis` for every line of a complex array.
fn fft_along(shape: &[usize], buf: &mut [Complex64], axis: usize) {
    let len = shape[axis];
    if len <= 1 {
        return;
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let plan = fft::plan(len);
    if inner == 1 {
        buf.chunks_mut(len).for_each(|l| plan.process(l));
        return;
    }
    let mut line = vec![Complex64::new(0.0, 0.0); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = buf[base + k * inner];
            }
            plan.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                buf[base + k * inner] = *v;
            }
        }
    }
}

/// Copies `data` (shape `shape`) into a zero buffer of shape `padded`.
fn embed(shape: &[usize], data: &[f64], padded: &[usize]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); numel(padded)];
    for_each_index(shape, |src, idx| {
        out[flat(padded, idx)] = Complex64::new(data[src], 0.0);
    });
    out
}

/// Inverse of [`embed`] for real parts: crops `padded` back to `shape`.
fn crop(padded: &[usize], data: &[f64], shape: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(shape)];
    for_each_index(shape, |dst, idx| out[dst] = data[flat(padded, idx)]);
    out
}

fn flat(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (i, s)| acc * s + i)
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n = numel(shape);
    let mut idx = vec![0usize; shape.len()];
    for lin in 0..n {
        f(lin, &idx);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Rotates each of `axes` by `floor(len/2)` (forward) or back (inverse).
fn roll<T: Copy + Default>(shape: &[usize], data: &[T], axes: &[usize], inverse: bool) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    // per-axis destination offsets of every source coordinate
    let maps: Vec<Vec<usize>> = (0..rank)
        .map(|a| {
            let len = shape[a];
            let k = match (axes.contains(&a), inverse) {
                (false, _) => 0,
                (true, false) => len / 2,
                (true, true) => len - len / 2,
            };
            (0..len).map(|i| (i + k) % len * strides[a]).collect()
        })
        .collect();
    let mut out = vec![T::default(); data.len()];
    if rank == 0 {
        out.copy_from_slice(data);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    for chunk in data.chunks(shape[last].max(1)) {
        let base: usize = (0..last).map(|a| maps[a][idx[a]]).sum();
        for (v, off) in chunk.iter().zip(&maps[last]) {
            out[base + off] = *v;
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// FFT over the transformed axes of `x`: the token axis for `Seq`, the
/// `(H, W)` plane for `Grid`, independently per batch item and channel.
pub fn fft_forward(x: &Tensor, layout: Layout) -> Result<Spectrum> {
    layout.check_rank(x.shape())?;
    let padded = padded_shape(x.shape(), layout);
    let mut buf = embed(x.shape(), x.data(), &padded);
    for &a in layout.transformed_axes() {
        fft_along(&padded, &mut buf, a);
    }
    let real = Tensor::from_parts(padded.clone(), buf.iter().map(|c| c.re).collect());
    let imag = Tensor::from_parts(padded, buf.iter().map(|c| c.im).collect());
    Ok(Spectrum {
        real,
        imag,
        centered: false,
        layout,
    })
}

/// Elementwise modulus; the phase is dropped.
pub fn magnitude(s: &Spectrum) -> Tensor {
    Tensor::from_parts(
        s.real.shape().to_vec(),
        s.real
            .data()
            .iter()
            .zip(s.imag.data())
            .map(|(re, im)| modulus(*re, *im))
            .collect(),
    )
}

fn modulus(re: f64, im: f64) -> f64 {
    (re * re + im * im).sqrt()
}

/// Moves the zero-frequency bin of every transformed axis to `floor(len/2)`.
pub fn center_shift(s: Spectrum) -> Result<Spectrum> {
    if s.centered {
        return Err(Error::contract("spectrum is already centered"));
    }
    Ok(shift(s, false))
}

/// Undoes [`center_shift`].
pub fn inverse_shift(s: Spectrum) -> Result<Spectrum> {
    if !s.centered {
        return Err(Error::contract("spectrum is not centered"));
    }
    Ok(shift(s, true))
}

fn shift(s: Spectrum, inverse: bool) -> Spectrum {
    let shape = s.real.shape().to_vec();
    let axes = s.layout.transformed_axes();
    let real = Tensor::from_parts(shape.clone(), roll(&shape, s.real.data(), axes, inverse));
    let imag = Tensor::from_parts(shape.clone(), roll(&shape, s.imag.data(), axes, inverse));
    Spectrum {
        real,
        imag,
        centered: !inverse,
        layout: s.layout,
    }
}

/// Centered magnitude spectrum: `center_shift(fft_forward(x))` followed by
/// [`magnitude`].
pub fn centered_magnitude(x: &Tensor, layout: Layout) -> Result<Tensor> {
    Ok(magnitude(&center_shift(fft_forward(x, layout)?)?))
}

/// Denominator floor for the magnitude derivative.
const MAG_FLOOR: f64 = 1e-12;

/// What the taped centered-magnitude op keeps for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct MagSaved {
    layout: Layout,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    // uncentered spectrum
    re: Vec<f64>,
    im: Vec<f64>,
}

pub(crate) fn mag_forward(x: &Tensor, layout: Layout) -> Result<(Tensor, MagSaved)> {
    let spec = fft_forward(x, layout)?;
    let mag = magnitude(&spec);
    let out = Tensor::from_parts(
        mag.shape().to_vec(),
        roll(mag.shape(), mag.data(), layout.transformed_axes(), false),
    );
    let saved = MagSaved {
        layout,
        in_shape: x.shape().to_vec(),
        out_shape: out.shape().to_vec(),
        re: spec.real.into_data(),
        im: spec.imag.into_data(),
    };
    Ok((out, saved))
}

/// Backward of the centered magnitude. The FFT is linear, so its adjoint is
/// the conjugate-transposed transform: `dx = Re(FFT(dRe - i dIm))`, cropped
/// back to the unpadded input.
pub(crate) fn mag_backward(g: &[f64], saved: &MagSaved) -> Vec<f64> {
    let axes = saved.layout.transformed_axes();
    let g = roll(&saved.out_shape, g, axes, true);
    let mut buf: Vec<Complex64> = g
        .iter()
        .zip(saved.re.iter().zip(&saved.im))
        .map(|(&gi, (&re, &im))| {
            let m = modulus(re, im).max(MAG_FLOOR);
            Complex64::new(gi * re / m, -gi * im / m)
        })
        .collect();
    for &a in axes {
        fft_along(&saved.out_shape, &mut buf, a);
    }
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    crop(&saved.out_shape, &re, &saved.in_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn seq(data: &[f64]) -> Tensor {
        Tensor::new([1, data.len(), 1], data.to_vec()).unwrap()
    }

    #[test]
    fn unit_impulse_and_dc() {
        let s = fft_forward(&seq(&[1.0, 0.0, 0.0, 0.0]), Layout::Seq).unwrap();
        assert_eq!(s.real.data(), &[1.0; 4]);
        assert!(s.imag.data().iter().all(|v| *v == 0.0));

        let s = fft_forward(&seq(&[2.5; 8]), Layout::Seq).unwrap();
        assert!((s.real.data()[0] - 20.0).abs() < 1e-12);
        for k in 1..8 {
            assert!(s.real.data()[k].abs() < 1e-12 && s.imag.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn magnitude_of_3_4_bin() {
        let s = Spectrum {
            real: Tensor::new([1, 1, 1], vec![3.0]).unwrap(),
            imag: Tensor::new([1, 1, 1], vec![4.0]).unwrap(),
            centered: false,
            layout: Layout::Seq,
        };
        assert_eq!(magnitude(&s).data(), &[5.0]);
        let zero = Spectrum {
            real: Tensor::zeros([1, 4, 2]),
            imag: Tensor::zeros([1, 4, 2]),
            centered: false,
            layout: Layout::Seq,
        };
        assert_eq!(magnitude(&zero), Tensor::zeros([1, 4, 2]));
    }

    #[test]
    fn center_shift_half_rotation() {
        let s = Spectrum {
            real: seq(&[0.0, 1.0, 2.0, 3.0]),
            imag: Tensor::zeros([1, 4, 1]),
            centered: false,
            layout: Layout::Seq,
        };
        let c = center_shift(s.clone()).unwrap();
        assert_eq!(c.real.data(), &[2.0, 3.0, 0.0, 1.0]);
        assert!(center_shift(c.clone()).is_err());
        assert_eq!(inverse_shift(c).unwrap(), s);
    }

    #[test]
    fn dc_lands_at_half_extent() {
        for n in [4usize, 8, 16] {
            let s = fft_forward(&seq(&vec![1.0; n]), Layout::Seq).unwrap();
            let c = center_shift(s).unwrap();
            let m = magnitude(&c);
            let argmax = (0..n)
                .max_by(|&a, &b| m.data()[a].total_cmp(&m.data()[b]))
                .unwrap();
            assert_eq!(argmax, n / 2);
        }
    }

    #[test]
    fn non_power_of_two_is_zero_padded() {
        let x = seq(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = fft_forward(&x, Layout::Seq).unwrap();
        assert_eq!(s.shape(), &[1, 8, 1]);
        assert!((s.real.data()[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn grid_rank_checked() {
        assert!(fft_forward(&Tensor::zeros([1, 4, 4]), Layout::Grid).is_err());
        assert!(fft_forward(&Tensor::zeros([1, 0, 2]), Layout::Seq).is_err());
    }

    #[test]
    fn centered_magnitude_is_even_symmetric() {
        let mut rng = SeededRng::new(11);
        let x = Tensor::randn([2, 3, 8, 8], &mut rng);
        let m = centered_magnitude(&x, Layout::Grid).unwrap();
        // with DC at (4,4), bin (4+a, 4+b) mirrors (4-a, 4-b) modulo 8
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..8 {
                    for j in 0..8 {
                        let mi = (8 - i) % 8;
                        let mj = (8 - j) % 8;
                        let v = m.at(&[b, c, i, j]);
                        let w = m.at(&[b, c, mi, mj]);
                        assert!((v - w).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
