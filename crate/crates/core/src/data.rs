//! Datasets: the synthetic texture/shape set, packed-record ingestion, and
//! seeded augmentation.
//!
//! Packed records follow the classic CIFAR binary layout: one label byte
//! followed by the red, green and blue planes of `H x W` u8 pixels, rows in
//! row-major order. A manifest names the record files and their split:
//!
//! ```text
//! # comment
//! image_size = 32
//! num_classes = 10
//! file = train.bin train
//! file = val.bin val
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, 3, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn pixels(&self) -> usize {
        CHANNELS * self.image_size() * self.image_size()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images.data()[i * p..(i + 1) * p]
    }

    /// Images and labels at `indices`, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new([indices.len(), CHANNELS, s, s], data).expect("finite pixels"), labels)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::invalid("empty dataset"));
        }
        if self.images.shape()[0] != n {
            return Err(Error::invalid("image and label counts differ"));
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::invalid("label out of range"));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel outside [0, 1]"));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val) {
            if i >= n || seen[i] {
                return Err(Error::invalid("split indices overlap or are out of range"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split indices do not cover the dataset"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Fraction of each class held out for validation.
    pub val_fraction: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            n_per_class: 100,
            image_size: 32,
            seed: 0,
            val_fraction: 0.55,
            noise: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Cross,
    Ring,
    Triangle,
}

const SHAPES: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Cross, Shape::Ring, Shape::Triangle];

impl Shape {
    /// Membership test in unit coordinates centered on the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r = u * u + v * v;
                (0.45..=1.0).contains(&r)
            }
            Shape::Triangle => v <= 0.8 && v >= -1.0 + 2.0 * u.abs(),
        }
    }
}

/// Class texture: grating cycles per image and orientation.
fn class_grating(c: usize) -> (f64, f64) {
    let freq = [2.0, 3.5, 5.0, 7.0, 9.5][c % 5];
    let theta = (c / 5) as f64 * PI / 2.0 + (c % 3) as f64 * PI / 6.0;
    (freq, theta)
}

fn class_shape(c: usize) -> Shape {
    SHAPES[(c * 2 + c / 5) % SHAPES.len()]
}

fn render(c: usize, size: usize, noise: f64, rng: &mut SeededRng) -> Vec<f64> {
    let (freq, theta) = class_grating(c);
    let freq = freq * rng.uniform(0.9, 1.1);
    let theta = theta + rng.uniform(-0.15, 0.15);
    let phase = rng.uniform(0.0, 2.0 * PI);
    let amp = rng.uniform(0.12, 0.25);
    let tint: Vec<f64> = (0..CHANNELS).map(|_| rng.uniform(0.4, 1.0)).collect();
    let shape = class_shape(c);
    let radius = rng.uniform(0.18, 0.3) * size as f64;
    let cx = rng.uniform(radius, size as f64 - radius);
    let cy = rng.uniform(radius, size as f64 - radius);
    let fill: Vec<f64> = (0..CHANNELS).map(|_| rng.uniform(-0.35, 0.35)).collect();
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = vec![0.0; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let g = (2.0 * PI * freq * (xf * ct + yf * st) / size as f64 + phase).sin();
            let inside = shape.contains((xf - cx) / radius, (yf - cy) / radius);
            for ch in 0..CHANNELS {
                let mut v = 0.5 + amp * tint[ch] * g;
                if inside {
                    v += fill[ch].signum() * 0.15 + fill[ch];
                }
                v += noise * rng.normal();
                out[(ch * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Class-conditional gratings (frequency and orientation) overlaid with a
/// class shape at a random position, random tint, and pixel noise.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if cfg.n_per_class == 0 || cfg.image_size < 4 {
        return Err(Error::invalid("empty class or image too small"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid("val_fraction must be in [0, 1)"));
    }
    let (k, m, s) = (cfg.num_classes, cfg.n_per_class, cfg.image_size);
    let n_val = ((m as f64) * cfg.val_fraction).round() as usize;
    let mut data = Vec::with_capacity(k * m * CHANNELS * s * s);
    let mut labels = Vec::with_capacity(k * m);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    // interleave classes so contiguous slices stay balanced
    for j in 0..m {
        for c in 0..k {
            let idx = labels.len();
            let mut rng = SeededRng::keyed(cfg.seed, &[c as u64, j as u64]);
            data.extend(render(c, s, cfg.noise, &mut rng));
            labels.push(c);
            if j < m - n_val {
                train.push(idx);
            } else {
                val.push(idx);
            }
        }
    }
    let ds = Dataset {
        images: Tensor::new([k * m, CHANNELS, s, s], data)?,
        labels,
        train,
        val,
        num_classes: k,
        provenance: Provenance::Synthetic,
    };
    ds.validate()?;
    Ok(ds)
}

/// Validation accuracy of a 1-nearest-neighbour pixel classifier fitted on
/// the training split.
pub fn nearest_neighbor_accuracy(ds: &Dataset) -> f64 {
    if ds.val.is_empty() {
        return 0.0;
    }
    let mut correct = 0;
    for &v in &ds.val {
        let q = ds.image(v);
        let best = ds
            .train
            .iter()
            .map(|&t| {
                let d: f64 = q.iter().zip(ds.image(t)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, t)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, t)| t);
        if best.is_some_and(|t| ds.labels[t] == ds.labels[v]) {
            correct += 1;
        }
    }
    correct as f64 / ds.val.len() as f64
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `train.bin`, `val.bin` and `manifest.txt` into `dir`.
pub fn write_packed(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    for (name, split) in [("train.bin", &ds.train), ("val.bin", &ds.val)] {
        let mut bytes = Vec::with_capacity(split.len() * (1 + ds.pixels()));
        for &i in split {
            bytes.push(u8::try_from(ds.labels[i]).map_err(|_| Error::invalid("label does not fit a byte"))?);
            bytes.extend(ds.image(i).iter().map(|&v| quantize(v)));
        }
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = dir.join("manifest.txt");
    fs::write(
        &manifest,
        format!(
            "# packed records: label byte, then R, G, B planes\nimage_size = {}\nnum_classes = {}\nfile = train.bin train\nfile = val.bin val\n",
            ds.image_size(),
            ds.num_classes
        ),
    )?;
    Ok(manifest)
}

/// Loads the record files listed in `manifest` (paths relative to `dir`).
pub fn load_external(dir: &Path, manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest)?;
    let mut size = None;
    let mut classes = None;
    let mut files = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", manifest.display(), no + 1)))?;
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{}:{}: bad integer `{v}`", manifest.display(), no + 1)))
        };
        match key {
            "image_size" => size = Some(parse(value)?),
            "num_classes" => classes = Some(parse(value)?),
            "file" => {
                let mut parts = value.split_whitespace();
                let (Some(name), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Config(format!("{}:{}: expected `file = NAME SPLIT`", manifest.display(), no + 1)));
                };
                let is_train = match split {
                    "train" => true,
                    "val" => false,
                    other => return Err(Error::Config(format!("unknown split `{other}`"))),
                };
                files.push((name.to_string(), is_train));
            }
            other => return Err(Error::Config(format!("unknown manifest key `{other}`"))),
        }
    }
    if files.is_empty() {
        return Err(Error::invalid(format!("manifest {} lists no record files: empty dataset", manifest.display())));
    }
    let size = size.ok_or_else(|| Error::Config("manifest lacks image_size".into()))?;
    let classes = classes.ok_or_else(|| Error::Config("manifest lacks num_classes".into()))?;
    let pixels = CHANNELS * size * size;
    let record = 1 + pixels;
    let (mut data, mut labels, mut train, mut val) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (name, is_train) in files {
        let path = dir.join(&name);
        let bytes = fs::read(&path)?;
        if bytes.len() % record != 0 {
            let offset = (bytes.len() / record * record) as u64;
            return Err(Error::Format {
                path,
                offset,
                detail: format!(
                    "truncated record: {} trailing bytes, record length {record}",
                    bytes.len() % record
                ),
            });
        }
        for (r, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[0] as usize;
            if label >= classes {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: (r * record) as u64,
                    detail: format!("label {label} out of range for {classes} classes"),
                });
            }
            let idx = labels.len();
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
            if is_train { &mut train } else { &mut val }.push(idx);
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("record files hold no samples: empty dataset"));
    }
    let ds = Dataset {
        images: Tensor::new([labels.len(), CHANNELS, size, size], data)?,
        labels,
        train,
        val,
        num_classes: classes,
        provenance: Provenance::External,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
}

impl AugmentFlags {
    pub const ALL: AugmentFlags = AugmentFlags {
        flip: true,
        crop: true,
        jitter: true,
    };

    pub fn any(&self) -> bool {
        self.flip || self.crop || self.jitter
    }
}

/// Zero padding used before random crops.
pub const CROP_PAD: usize = 4;

/// Mirrors one `(C, H, W)` image left to right.
pub fn hflip(img: &mut [f64], size: usize) {
    for row in img.chunks_mut(size) {
        row.reverse();
    }
}

fn shift(img: &[f64], size: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let s = size as isize;
    for (plane, dst) in img.chunks(size * size).zip(out.chunks_mut(size * size)) {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y + dy, x + dx);
                if (0..s).contains(&sy) && (0..s).contains(&sx) {
                    dst[(y * s + x) as usize] = plane[(sy * s + sx) as usize];
                }
            }
        }
    }
    out
}

/// Per-sample flip, pad-then-crop and brightness/contrast jitter. Each
/// sample draws from a stream keyed by `(seed, epoch, index)`, so the same
/// sample in the same epoch is augmented identically in every run.
pub fn augment(batch: &Tensor, indices: &[usize], flags: AugmentFlags, seed: u64, epoch: u64) -> Tensor {
    let s = batch.shape()[2];
    let per = CHANNELS * s * s;
    let mut out = batch.clone();
    if flags == AugmentFlags::default() {
        return out;
    }
    for (img, &idx) in out.data_mut().chunks_mut(per).zip(indices) {
        let mut rng = SeededRng::keyed(seed, &[0xa06, epoch, idx as u64]);
        if flags.flip && rng.bernoulli(0.5) {
            hflip(img, s);
        }
        if flags.crop {
            let span = 2 * CROP_PAD + 1;
            let dy = rng.below(span) as isize - CROP_PAD as isize;
            let dx = rng.below(span) as isize - CROP_PAD as isize;
            let shifted = shift(img, s, dy, dx);
            img.copy_from_slice(&shifted);
        }
        if flags.jitter {
            let bright = rng.uniform(-0.1, 0.1);
            let contrast = rng.uniform(0.9, 1.1);
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            for v in img.iter_mut() {
                *v = ((*v - mean) * contrast + mean + bright).clamp(0.0, 1.0);
            }
        }
    }
    out
}
