use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::Tensor;

/// Non-overlapping mean pooling over the layout's transformed axes.
#[derive(Clone, Debug)]
pub(crate) struct PoolGeom {
    layout: Layout,
    factor: usize,
    in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl PoolGeom {
    pub fn new(shape: &[usize], layout: Layout, factor: usize) -> Result<Self> {
        layout.check_rank(shape)?;
        if factor == 0 {
            return Err(Error::invalid("pooling factor must be positive"));
        }
        let mut out_shape = shape.to_vec();
        for &a in layout.transformed_axes() {
            if shape[a] % factor != 0 {
                return Err(Error::invalid(format!(
                    "pooling factor {factor} does not divide axis {a} of {shape:?}"
                )));
            }
            out_shape[a] = shape[a] / factor;
        }
        Ok(Self {
            layout,
            factor,
            in_shape: shape.to_vec(),
            out_shape,
        })
    }

    fn window(&self) -> usize {
        self.factor.pow(self.layout.transformed_axes().len() as u32)
    }

    /// Output index for every input element.
    fn target(&self, i: usize) -> usize {
        let s = &self.in_shape;
        let f = self.factor;
        match self.layout {
            Layout::Seq => {
                let (n, c) = (s[1], s[2]);
                let b = i / (n * c);
                let t = (i / c) % n;
                let ch = i % c;
                (b * (n / f) + t / f) * c + ch
            }
            Layout::Grid => {
                let (h, w) = (s[2], s[3]);
                let plane = i / (h * w);
                let y = (i / w) % h;
                let x = i % w;
                (plane * (h / f) + y / f) * (w / f) + x / f
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_out: usize = self.out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        for (i, &v) in x.iter().enumerate() {
            out[self.target(i)] += v;
        }
        let scale = 1.0 / self.window() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let scale = 1.0 / self.window() as f64;
        (0..self.in_shape.iter().product::<usize>())
            .map(|i| g[self.target(i)] * scale)
            .collect()
    }
}

/// Parameter-free average pooling: 1-D windows along the token axis for
/// `Seq`, `factor x factor` windows over `(H, W)` for `Grid`.
pub fn avg_downsample(x: &Tensor, layout: Layout, factor: usize) -> Result<Tensor> {
    let geom = PoolGeom::new(x.shape(), layout, factor)?;
    let data = geom.forward(x.data());
    Ok(Tensor::from_parts(geom.out_shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn pairs_average() {
        let x = Tensor::new([1, 4, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = avg_downsample(&x, Layout::Seq, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full([2, 3, 8, 8], 1.5);
        let y = avg_downsample(&x, Layout::Grid, 4).unwrap();
        assert_eq!(y, Tensor::full([2, 3, 2, 2], 1.5));
    }

    #[test]
    fn grid_matches_window_oracle() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn([2, 2, 8, 8], &mut rng);
        let y = avg_downsample(&x, Layout::Grid, 2).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        let mut acc = 0.0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                acc += x.at(&[b, c, 2 * i + di, 2 * j + dj]);
                            }
                        }
                        assert!((y.at(&[b, c, i, j]) - acc / 4.0).abs() < 1e-12);
                    }
                }
            }
        }
        assert!((y.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_divisible() {
        let x = Tensor::zeros([1, 6, 2]);
        assert!(avg_downsample(&x, Layout::Seq, 4).is_err());
        assert!(avg_downsample(&x, Layout::Seq, 0).is_err());
        assert_eq!(avg_downsample(&x, Layout::Seq, 1).unwrap(), x);
    }
}
