use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Band parameters of the frequency filter.
///
/// Distances are normalized by the largest center distance on the grid, so
/// `sigma_*` are fractions of that distance and independent of resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskParams {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub high_weight: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            sigma_low: 0.5,
            sigma_high: 0.5,
            high_weight: 0.2,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_low > 0.0) || !(self.sigma_high > 0.0) {
            return Err(Error::invalid(format!(
                "mask bandwidths must be positive (sigma_low={}, sigma_high={})",
                self.sigma_low, self.sigma_high
            )));
        }
        if !(0.0..=1.0).contains(&self.high_weight) {
            return Err(Error::invalid(format!(
                "high_weight must lie in [0,1], got {}",
                self.high_weight
            )));
        }
        Ok(())
    }

    /// Low band alone: `exp(-(d/sigma_low)^2)`.
    pub fn low(&self, d: f64) -> f64 {
        (-(d / self.sigma_low).powi(2)).exp()
    }

    /// Complementary high band: `1 - exp(-(d/sigma_high)^2)`.
    pub fn high(&self, d: f64) -> f64 {
        1.0 - (-(d / self.sigma_high).powi(2)).exp()
    }

    /// Combined response at normalized center distance `d`.
    pub fn response(&self, d: f64) -> f64 {
        (self.low(d) + self.high_weight * self.high(d)).clamp(0.0, 1.0)
    }
}

/// Multiplicative mask over the transformed extents of a centered spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    pub values: Tensor,
    pub params: Option<MaskParams>,
}

impl FrequencyMask {
    /// All-pass mask (filter disabled).
    pub fn identity(extents: &[usize]) -> Self {
        Self {
            values: Tensor::ones(extents.to_vec()),
            params: None,
        }
    }

    pub fn extents(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Center index per axis, matching where the centering shift puts DC.
fn centers(extents: &[usize]) -> Vec<f64> {
    extents.iter().map(|&e| (e / 2) as f64).collect()
}

/// Normalized distance of every bin to the spectral center, row-major over
/// `extents`. The farthest corner sits at distance 1.
pub fn normalized_distances(extents: &[usize]) -> Tensor {
    let c = centers(extents);
    let d_max = extents
        .iter()
        .zip(&c)
        .map(|(&e, &ci)| {
            let far = ci.max((e - 1) as f64 - ci);
            far * far
        })
        .sum::<f64>()
        .sqrt();
    Tensor::from_fn(extents.to_vec(), |idx| {
        if d_max == 0.0 {
            return 0.0;
        }
        let d2: f64 = idx
            .iter()
            .zip(&c)
            .map(|(&i, &ci)| (i as f64 - ci).powi(2))
            .sum();
        d2.sqrt() / d_max
    })
}

/// Builds the combined Gaussian low/high mask over `extents` (one extent for
/// sequences, two for grids).
pub fn build_mask(extents: &[usize], params: MaskParams) -> Result<FrequencyMask> {
    params.validate()?;
    if extents.is_empty() || extents.len() > 2 || extents.contains(&0) {
        return Err(Error::invalid(format!("bad mask extents {extents:?}")));
    }
    Ok(FrequencyMask {
        values: normalized_distances(extents).map(|d| params.response(d)),
        params: Some(params),
    })
}

/// Hadamard product of a centered magnitude spectrum with `mask`, broadcast
/// over batch and channel axes. A rank-1 mask applies to axis 1 of a
/// `(B, N, C)` block, a rank-2 mask to axes 2-3 of a `(B, C, H, W)` block.
pub fn apply_mask(spec_mag: &Tensor, mask: &FrequencyMask) -> Result<Tensor> {
    let s = spec_mag.shape();
    let m = mask.values.data();
    let mut out = spec_mag.clone();
    match mask.extents() {
        &[n] if s.len() == 3 && s[1] == n => {
            let c = s[2];
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= m[(i / c) % n];
            }
        }
        &[h, w] if s.len() == 4 && s[2] == h && s[3] == w => {
            let plane = h * w;
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= m[i % plane];
            }
        }
        ext => return Err(Error::shape("apply_mask", s, ext)),
    }
    Ok(out)
}
