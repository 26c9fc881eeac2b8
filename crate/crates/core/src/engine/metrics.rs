//! Similarity measures, run records and the metrics CSV.

use std::fmt::Write as _;
use std::time::Duration;

use crate::losses::LossBreakdown;

pub const CSV_HEADER: &str = "epoch,split,acc,mse,kl,ce,total,stage,cos_raw,cos_uhkd,pearson_raw,pearson_uhkd";

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine of unequal lengths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson of unequal lengths");
    if a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
    cosine(&ca, &cb)
}

/// Nearest resampling of `v` to `len` samples.
pub fn nearest_resize(v: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|i| v[i * v.len() / len]).collect()
}

/// Mean of the defined values; `None` when none are defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-stage similarity and loss for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    /// Mean training MSE of this stage over the epoch.
    pub mse: Option<f64>,
    pub cos_raw: Option<f64>,
    pub cos_uhkd: Option<f64>,
    pub pearson_raw: Option<f64>,
    pub pearson_uhkd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Epoch means of the training loss terms.
    pub loss: LossBreakdown,
    pub stages: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
    /// SHA-256 of the final checkpoint bytes.
    pub checkpoint_digest: String,
}

impl RunReport {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.csv_rows());
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochRecord {
    /// A train aggregate row, a val aggregate row (`stage = 0`, similarity
    /// averaged over stages), then one val row per stage.
    pub fn csv_rows(&self) -> String {
        let l = &self.loss;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{},train,{},{},{},{},{},0,,,,",
            self.epoch, self.train_acc, l.mse, l.kl, l.ce, l.total
        );
        let agg = |f: fn(&StageRecord) -> Option<f64>| opt(mean_defined(self.stages.iter().map(f)));
        let _ = writeln!(
            out,
            "{},val,{},{},{},{},{},0,{},{},{},{}",
            self.epoch,
            self.val_acc,
            l.mse,
            l.kl,
            l.ce,
            l.total,
            agg(|s| s.cos_raw),
            agg(|s| s.cos_uhkd),
            agg(|s| s.pearson_raw),
            agg(|s| s.pearson_uhkd)
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{},val,{},{},,,,{},{},{},{},{}",
                self.epoch,
                self.val_acc,
                opt(s.mse),
                s.stage,
                opt(s.cos_raw),
                opt(s.cos_uhkd),
                opt(s.pearson_raw),
                opt(s.pearson_uhkd)
            );
        }
        out
    }
}
