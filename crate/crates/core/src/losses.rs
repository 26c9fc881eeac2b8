//! Frequency-domain MSE, temperature-scaled KL and label-smoothed CE, and
//! their weighted combination.

use crate::error::{Error, Result};
use crate::fam::FamOutput;
use crate::ftm::FtmOutput;
use crate::tensor::{Tensor, Var};

pub const LAMBDA_KL: f64 = 0.4;
pub const LAMBDA_CE: f64 = 0.3;
pub const DEFAULT_TAU: f64 = 4.0;
pub const LABEL_SMOOTHING: f64 = 0.1;

/// Loss weights and the softening/smoothing knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_ce: f64,
    pub tau: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: LAMBDA_KL,
            lambda_ce: LAMBDA_CE,
            tau: DEFAULT_TAU,
            smoothing: LABEL_SMOOTHING,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_kl) || !ok(self.lambda_ce) || self.lambda_kl + self.lambda_ce > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "loss weights need 0 <= lambda_kl + lambda_ce <= 1 (got {} + {})",
                self.lambda_kl, self.lambda_ce
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid(format!("label smoothing must be in [0, 1), got {}", self.smoothing)));
        }
        Ok(())
    }

    pub fn lambda_mse(&self) -> f64 {
        1.0 - self.lambda_kl - self.lambda_ce
    }

    /// Weighted total of raw terms.
    pub fn combine(&self, mse: f64, kl: f64, ce: f64) -> f64 {
        self.lambda_mse() * mse + self.lambda_kl * kl + self.lambda_ce * ce
    }
}

/// Per-step record of the loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub ce: f64,
    pub total: f64,
    pub lambda_kl: f64,
    pub lambda_ce: f64,
    pub tau: f64,
    /// `(stage, mse)` for every aligned stage, in stage order.
    pub per_stage_mse: Vec<(usize, f64)>,
}

fn scalar(v: Var<'_>) -> f64 {
    v.value().data()[0]
}

/// Mean squared difference; the teacher target is a constant.
pub fn freq_mse<'t>(t: &FtmOutput, s: &FamOutput<'t>) -> Result<Var<'t>> {
    if t.tensor.shape() != s.var.shape().as_slice() {
        return Err(Error::shape("freq_mse", t.tensor.shape(), &s.var.shape()));
    }
    let target = s.var.tape().constant(t.tensor.clone());
    s.var.sub(target)?.square()?.mean_all()
}

fn check_logits(op: &'static str, z: &[usize]) -> Result<(usize, usize)> {
    match *z {
        [b, k] if k >= 2 && b > 0 => Ok((b, k)),
        _ => Err(Error::invalid(format!("{op} expects (B, K >= 2) logits, got {z:?}"))),
    }
}

/// `tau^2 * mean_b KL(softmax(z_t/tau) || softmax(z_s/tau))`. Teacher logits
/// are plain values, so nothing flows back into the teacher.
pub fn kd_kl<'t>(z_t: &Tensor, z_s: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let (b, k) = check_logits("kd_kl", &z_s.shape())?;
    if z_t.shape() != [b, k] {
        return Err(Error::shape("kd_kl", z_t.shape(), &[b, k]));
    }
    let tape = z_s.tape();
    let log_p = tape.constant(z_t.map(|v| v / tau)).log_softmax()?.value();
    let p = log_p.map(f64::exp);
    let entropy_term: f64 = p.data().iter().zip(log_p.data()).map(|(p, l)| p * l).sum();
    let log_q = z_s.scale(1.0 / tau)?.log_softmax()?;
    let cross = tape.constant(p).mul(log_q)?.sum_all()?;
    // sum p log p - sum p log q, averaged over the batch
    cross.neg()?.offset(entropy_term)?.scale(tau * tau / b as f64)
}

/// Cross-entropy against `(1 - eps)` on the true class and `eps / (K - 1)`
/// elsewhere, averaged over the batch.
pub fn cross_entropy_smoothed<'t>(z_s: Var<'t>, labels: &[usize], smoothing: f64) -> Result<Var<'t>> {
    let (b, k) = check_logits("cross_entropy_smoothed", &z_s.shape())?;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("label smoothing must be in [0, 1), got {smoothing}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let off = smoothing / (k - 1) as f64;
    let target = Tensor::from_fn([b, k], |i| if i[1] == labels[i[0]] { 1.0 - smoothing } else { off });
    let logp = z_s.log_softmax()?;
    z_s.tape().constant(target).mul(logp)?.sum_all()?.scale(-1.0 / b as f64)
}

/// Weighted objective over the aligned stage pairs and the logits. Stage
/// MSEs are averaged. With a zero MSE weight the pairs may be empty.
pub fn total_loss<'t>(
    pairs: &[(FtmOutput, FamOutput<'t>)],
    z_t: &Tensor,
    z_s: Var<'t>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    w.validate()?;
    let tape = z_s.tape();
    let mut per_stage = Vec::with_capacity(pairs.len());
    let mut mse_sum: Option<Var<'t>> = None;
    for (t, s) in pairs {
        if t.stage != s.stage {
            return Err(Error::contract(format!("stage pair mismatch: {} vs {}", t.stage, s.stage)));
        }
        let m = freq_mse(t, s)?;
        per_stage.push((t.stage, scalar(m)));
        mse_sum = Some(match mse_sum {
            None => m,
            Some(acc) => acc.add(m)?,
        });
    }
    let mse = match mse_sum {
        Some(sum) => sum.scale(1.0 / pairs.len() as f64)?,
        None if w.lambda_mse().abs() < 1e-15 => tape.constant(Tensor::zeros(Vec::<usize>::new())),
        None => return Err(Error::invalid("no aligned stages but the MSE weight is non-zero")),
    };
    let kl = kd_kl(z_t, z_s, w.tau)?;
    let ce = cross_entropy_smoothed(z_s, labels, w.smoothing)?;

    let mut total: Option<Var<'t>> = None;
    for (term, lambda) in [(mse, w.lambda_mse()), (kl, w.lambda_kl), (ce, w.lambda_ce)] {
        if lambda == 0.0 {
            continue;
        }
        let t = term.scale(lambda)?;
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(t)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => mse.scale(0.0)?,
    };
    let breakdown = LossBreakdown {
        mse: scalar(mse),
        kl: scalar(kl),
        ce: scalar(ce),
        total: scalar(total),
        lambda_kl: w.lambda_kl,
        lambda_ce: w.lambda_ce,
        tau: w.tau,
        per_stage_mse: per_stage,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tape;

    fn pair<'t>(tape: &'t Tape, t: Tensor, s: Tensor, stage: usize) -> (FtmOutput, FamOutput<'t>) {
        (
            FtmOutput { tensor: t, stage },
            FamOutput {
                var: tape.param(s),
                stage,
            },
        )
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let (t, s) = pair(&tape, Tensor::ones([1, 2, 2]), Tensor::zeros([1, 2, 2]), 1);
        assert_eq!(scalar(freq_mse(&t, &s).unwrap()), 1.0);
        let (t, s) = pair(&tape, Tensor::full([1, 2, 2], 0.3), Tensor::full([1, 2, 2], 0.3), 1);
        assert_eq!(scalar(freq_mse(&t, &s).unwrap()), 0.0);
        let (t, s) = pair(&tape, Tensor::ones([1, 2, 2]), Tensor::zeros([1, 4, 1]), 1);
        assert!(freq_mse(&t, &s).is_err());
    }

    #[test]
    fn mse_loop_oracle() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(4);
        let (b, n, c) = (2, 5, 3);
        let a = Tensor::randn([b, n, c], &mut rng);
        let s = Tensor::randn([b, n, c], &mut rng);
        let mut acc = 0.0;
        for i in 0..b {
            for j in 0..n {
                for k in 0..c {
                    acc += (a.at(&[i, j, k]) - s.at(&[i, j, k])).powi(2);
                }
            }
        }
        let expect = acc / (b * n * c) as f64;
        let (t, s) = pair(&tape, a, s, 2);
        assert!((scalar(freq_mse(&t, &s).unwrap()) - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_two_class_closed_form() {
        let tape = Tape::new();
        let zt = Tensor::new([1, 2], vec![2f64.ln() - 5.0, -5.0]).unwrap();
        let zs = tape.param(Tensor::zeros([1, 2]));
        let kl = scalar(kd_kl(&zt, zs, 1.0).unwrap());
        let expect = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.05663).abs() < 1e-5);
    }

    #[test]
    fn kl_identity_and_shift_invariance() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(9);
        let z = Tensor::randn([4, 6], &mut rng);
        assert!(scalar(kd_kl(&z, tape.constant(z.clone()), 4.0).unwrap()).abs() < 1e-12);
        let zs = Tensor::randn([4, 6], &mut rng);
        let base = scalar(kd_kl(&z, tape.constant(zs.clone()), 2.0).unwrap());
        let shifted_t = scalar(kd_kl(&z.map(|v| v + 7.5), tape.constant(zs.clone()), 2.0).unwrap());
        let shifted_s = scalar(kd_kl(&z, tape.constant(zs.map(|v| v - 3.0)), 2.0).unwrap());
        assert!((base - shifted_t).abs() < 1e-12);
        assert!((base - shifted_s).abs() < 1e-12);
        assert!(base > 0.0);
        assert!(kd_kl(&z, tape.constant(zs), 0.0).is_err());
    }

    #[test]
    fn ce_examples() {
        let tape = Tape::new();
        let z = Tensor::new([1, 3], vec![20.0, 0.0, 0.0]).unwrap();
        let ce = scalar(cross_entropy_smoothed(tape.constant(z), &[0], 0.0).unwrap());
        assert!(ce < 1e-8);
        let u = tape.constant(Tensor::zeros([3, 5]));
        let ce = scalar(cross_entropy_smoothed(u, &[0, 4, 2], 0.0).unwrap());
        assert!((ce - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_smoothed(u, &[0, 5, 2], 0.0).is_err());
    }

    #[test]
    fn ce_per_sample_oracle() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(2);
        let (b, k, eps) = (4, 5, 0.1);
        let z = Tensor::randn([b, k], &mut rng);
        let labels = [1, 0, 4, 2];
        let mut acc = 0.0;
        for i in 0..b {
            let row: Vec<f64> = (0..k).map(|j| z.at(&[i, j])).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                let q = if j == labels[i] { 1.0 - eps } else { eps / (k - 1) as f64 };
                acc -= q * (row[j] - lse);
            }
        }
        let got = scalar(cross_entropy_smoothed(tape.constant(z), &labels, eps).unwrap());
        assert!((got - acc / b as f64).abs() < 1e-12);
    }

    #[test]
    fn weight_algebra() {
        let w = LossWeights::default();
        assert!((w.lambda_mse() - 0.3).abs() < 1e-15);
        assert!((w.combine(1.0, 2.0, 3.0) - 2.0).abs() < 1e-12);
        let bad = LossWeights {
            lambda_kl: 0.8,
            lambda_ce: 0.3,
            ..w
        };
        assert!(bad.validate().is_err());
    }

    fn setup<'t>(tape: &'t Tape, rng: &mut SeededRng) -> (Vec<(FtmOutput, FamOutput<'t>)>, Tensor, Var<'t>) {
        let pairs = (1..=4)
            .map(|s| pair(tape, Tensor::randn([2, 3, 4], rng), Tensor::randn([2, 3, 4], rng), s))
            .collect();
        let zt = Tensor::randn([2, 5], rng);
        let zs = tape.param(Tensor::randn([2, 5], rng));
        (pairs, zt, zs)
    }

    #[test]
    fn breakdown_invariants() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(17);
        let (pairs, zt, zs) = setup(&tape, &mut rng);
        let w = LossWeights::default();
        let (v, b) = total_loss(&pairs, &zt, zs, &[1, 3], &w).unwrap();
        assert_eq!(scalar(v), b.total);
        assert!((b.total - w.combine(b.mse, b.kl, b.ce)).abs() < 1e-12);
        let mean = b.per_stage_mse.iter().map(|(_, m)| m).sum::<f64>() / 4.0;
        assert!((b.mse - mean).abs() < 1e-12);
        assert!(b.kl >= 0.0);

        for (lk, lc) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
            let w = LossWeights {
                lambda_kl: lk,
                lambda_ce: lc,
                ..w
            };
            let (_, d) = total_loss(&pairs, &zt, zs, &[1, 3], &w).unwrap();
            let single = [d.mse, d.kl, d.ce][if lk == 1.0 { 1 } else if lc == 1.0 { 2 } else { 0 }];
            assert!((d.total - single).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_kd_needs_no_pairs() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(1);
        let (_, zt, zs) = setup(&tape, &mut rng);
        let w = LossWeights {
            lambda_kl: 0.7,
            lambda_ce: 0.3,
            ..LossWeights::default()
        };
        let (_, b) = total_loss(&[], &zt, zs, &[0, 1], &w).unwrap();
        assert_eq!(b.mse, 0.0);
        assert!(total_loss(&[], &zt, zs, &[0, 1], &LossWeights::default()).is_err());
    }

    #[test]
    fn raw_terms_ignore_weights() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(5);
        let (pairs, zt, zs) = setup(&tape, &mut rng);
        let (_, a) = total_loss(&pairs, &zt, zs, &[0, 2], &LossWeights::default()).unwrap();
        let doubled = LossWeights {
            lambda_kl: 0.8,
            lambda_ce: 0.2,
            ..LossWeights::default()
        };
        let (_, b) = total_loss(&pairs, &zt, zs, &[0, 2], &doubled).unwrap();
        assert_eq!((a.mse, a.kl, a.ce), (b.mse, b.kl, b.ce));
        assert!((b.total - doubled.combine(b.mse, b.kl, b.ce)).abs() < 1e-12);
    }
}
