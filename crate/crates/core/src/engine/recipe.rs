//! Run configuration and its text form.
//!
//! Grammar: one `key = value` per line, optional `[section]` headers, `#`
//! starts a comment. Every key belongs to exactly one section; a key may
//! appear before any header, but under a header it must be that header's
//! key. Lists are comma separated, booleans are `true`/`false`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{AugmentFlags, SynthConfig};
use crate::error::{Error, Result};
use crate::fam::InterpMode;
use crate::ftm::FtmConfig;
use crate::losses::LossWeights;
use crate::spectral::MaskParams;
use crate::zoo::{Family, ModelSpec, NUM_STAGES};

use super::optim::AdamWConfig;

/// How student features are brought to the teacher's unified shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// Learnable adapter.
    Fam,
    /// Adapter kept at its random initialization.
    RandomInitFrozen,
    /// Parameter-free resize.
    Interp(InterpMode),
}

impl std::fmt::Display for AlignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlignMode::Fam => f.write_str("fam"),
            AlignMode::RandomInitFrozen => f.write_str("random_init_frozen"),
            AlignMode::Interp(m) => write!(f, "{m}"),
        }
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fam" => Ok(AlignMode::Fam),
            "random_init_frozen" => Ok(AlignMode::RandomInitFrozen),
            other => other.parse().map(AlignMode::Interp),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecipe {
    pub loss: LossWeights,
    /// Aligned stages, ascending, drawn from 1..=4.
    pub stages: Vec<usize>,
    pub mask: MaskParams,
    pub pool_factors: [usize; NUM_STAGES],
    pub no_fft: bool,
    pub no_filter: bool,
    pub no_downsample: bool,
    pub align_mode: AlignMode,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentFlags,
    /// Epoch cadence of checkpoint writes when an output directory is set.
    pub checkpoint_every: usize,
    /// Validation samples in the fixed similarity probe batch.
    pub probe_size: usize,
}

impl Default for DistillRecipe {
    fn default() -> Self {
        Self {
            loss: LossWeights::default(),
            stages: vec![1, 2, 3, 4],
            mask: MaskParams::default(),
            pool_factors: [2; NUM_STAGES],
            no_fft: false,
            no_filter: false,
            no_downsample: false,
            align_mode: AlignMode::Fam,
            lr: 1e-2,
            adamw: AdamWConfig::default(),
            warmup_fraction: 0.05,
            grad_clip: 5.0,
            seed: 0,
            epochs: 20,
            batch_size: 32,
            augment: AugmentFlags::default(),
            checkpoint_every: 1,
            probe_size: 32,
        }
    }
}

impl DistillRecipe {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mask.validate().map_err(|e| Error::Config(e.to_string()))?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return cfg("stages must not be empty".into());
        }
        if self.stages.iter().any(|s| !(1..=NUM_STAGES).contains(s)) || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return cfg(format!("stages must be ascending and within 1..=4, got {:?}", self.stages));
        }
        if self.pool_factors.contains(&0) {
            return cfg("pool factors must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return cfg(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return cfg("lr must be positive and warmup_fraction in [0, 1)".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return cfg("epochs, batch_size and checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Teacher-side transform settings for `stage`.
    pub fn ftm_config(&self, stage: usize) -> FtmConfig {
        FtmConfig {
            mask: self.mask,
            pool_factor: if self.no_downsample { 1 } else { self.pool_factors[stage - 1] },
            use_fft: !self.no_fft,
            use_filter: !self.no_filter,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// When set, packed records are loaded instead of generating data.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub teacher: ModelSpec,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub student: ModelSpec,
    pub recipe: DistillRecipe,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            data: DataConfig { synth, manifest: None },
            teacher: ModelSpec::teacher(Family::Attn, synth.num_classes),
            teacher_epochs: 20,
            teacher_lr: 1e-2,
            student: ModelSpec::small(Family::Cnn, synth.num_classes),
            recipe: DistillRecipe::default(),
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("data", "num_classes"),
    ("data", "n_per_class"),
    ("data", "image_size"),
    ("data", "noise"),
    ("data", "val_fraction"),
    ("data", "data_seed"),
    ("data", "manifest"),
    ("teacher", "teacher_family"),
    ("teacher", "teacher_widths"),
    ("teacher", "teacher_patch"),
    ("teacher", "teacher_mlp_ratio"),
    ("teacher", "teacher_epochs"),
    ("teacher", "teacher_lr"),
    ("student", "student_family"),
    ("student", "student_widths"),
    ("student", "student_patch"),
    ("student", "student_mlp_ratio"),
    ("loss", "lambda_kl"),
    ("loss", "lambda_ce"),
    ("loss", "tau"),
    ("loss", "label_smoothing"),
    ("align", "stages"),
    ("align", "sigma_low"),
    ("align", "sigma_high"),
    ("align", "high_weight"),
    ("align", "pool_factors"),
    ("align", "no_fft"),
    ("align", "no_filter"),
    ("align", "no_downsample"),
    ("align", "align_mode"),
    ("optim", "lr"),
    ("optim", "beta1"),
    ("optim", "beta2"),
    ("optim", "weight_decay"),
    ("optim", "eps"),
    ("optim", "warmup_fraction"),
    ("optim", "grad_clip"),
    ("train", "seed"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "augment"),
    ("train", "checkpoint_every"),
    ("train", "probe_size"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_four(key: &str, v: &str) -> Result<[usize; NUM_STAGES]> {
    parse_list(key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly four values")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_augment(v: &str) -> Result<AugmentFlags> {
    let mut f = AugmentFlags::default();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "none" => {}
            "flip" => f.flip = true,
            "crop" => f.crop = true,
            "jitter" => f.jitter = true,
            other => return Err(Error::Config(format!("unknown augmentation `{other}`"))),
        }
    }
    Ok(f)
}

fn augment_string(f: AugmentFlags) -> String {
    let mut v = Vec::new();
    if f.flip {
        v.push("flip");
    }
    if f.crop {
        v.push("crop");
    }
    if f.jitter {
        v.push("jitter");
    }
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}

impl Config {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let r = &mut self.recipe;
        let d = &mut self.data.synth;
        match key {
            "num_classes" => {
                d.num_classes = parse(key, v)?;
                self.teacher.num_classes = d.num_classes;
                self.student.num_classes = d.num_classes;
            }
            "n_per_class" => d.n_per_class = parse(key, v)?,
            "image_size" => {
                d.image_size = parse(key, v)?;
                self.teacher.image_size = d.image_size;
                self.student.image_size = d.image_size;
            }
            "noise" => d.noise = parse(key, v)?,
            "val_fraction" => d.val_fraction = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "manifest" => self.data.manifest = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "teacher_family" => self.teacher.family = v.parse()?,
            "teacher_widths" => self.teacher.stage_widths = parse_four(key, v)?,
            "teacher_patch" => self.teacher.patch_size = parse(key, v)?,
            "teacher_mlp_ratio" => self.teacher.mlp_ratio = parse(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "student_family" => self.student.family = v.parse()?,
            "student_widths" => self.student.stage_widths = parse_four(key, v)?,
            "student_patch" => self.student.patch_size = parse(key, v)?,
            "student_mlp_ratio" => self.student.mlp_ratio = parse(key, v)?,
            "lambda_kl" => r.loss.lambda_kl = parse(key, v)?,
            "lambda_ce" => r.loss.lambda_ce = parse(key, v)?,
            "tau" => r.loss.tau = parse(key, v)?,
            "label_smoothing" => r.loss.smoothing = parse(key, v)?,
            "stages" => r.stages = parse_list(key, v)?,
            "sigma_low" => r.mask.sigma_low = parse(key, v)?,
            "sigma_high" => r.mask.sigma_high = parse(key, v)?,
            "high_weight" => r.mask.high_weight = parse(key, v)?,
            "pool_factors" => r.pool_factors = parse_four(key, v)?,
            "no_fft" => r.no_fft = parse(key, v)?,
            "no_filter" => r.no_filter = parse(key, v)?,
            "no_downsample" => r.no_downsample = parse(key, v)?,
            "align_mode" => r.align_mode = v.parse()?,
            "lr" => r.lr = parse(key, v)?,
            "beta1" => r.adamw.beta1 = parse(key, v)?,
            "beta2" => r.adamw.beta2 = parse(key, v)?,
            "weight_decay" => r.adamw.weight_decay = parse(key, v)?,
            "eps" => r.adamw.eps = parse(key, v)?,
            "warmup_fraction" => r.warmup_fraction = parse(key, v)?,
            "grad_clip" => r.grad_clip = parse(key, v)?,
            "seed" => r.seed = parse(key, v)?,
            "epochs" => r.epochs = parse(key, v)?,
            "batch_size" => r.batch_size = parse(key, v)?,
            "augment" => r.augment = parse_augment(v)?,
            "checkpoint_every" => r.checkpoint_every = parse(key, v)?,
            "probe_size" => r.probe_size = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in config syntax.
    pub fn get(&self, key: &str) -> Result<String> {
        let r = &self.recipe;
        let d = &self.data.synth;
        Ok(match key {
            "num_classes" => d.num_classes.to_string(),
            "n_per_class" => d.n_per_class.to_string(),
            "image_size" => d.image_size.to_string(),
            "noise" => d.noise.to_string(),
            "val_fraction" => d.val_fraction.to_string(),
            "data_seed" => d.seed.to_string(),
            "manifest" => self
                .data
                .manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "teacher_family" => self.teacher.family.to_string(),
            "teacher_widths" => join(&self.teacher.stage_widths),
            "teacher_patch" => self.teacher.patch_size.to_string(),
            "teacher_mlp_ratio" => self.teacher.mlp_ratio.to_string(),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "teacher_lr" => self.teacher_lr.to_string(),
            "student_family" => self.student.family.to_string(),
            "student_widths" => join(&self.student.stage_widths),
            "student_patch" => self.student.patch_size.to_string(),
            "student_mlp_ratio" => self.student.mlp_ratio.to_string(),
            "lambda_kl" => r.loss.lambda_kl.to_string(),
            "lambda_ce" => r.loss.lambda_ce.to_string(),
            "tau" => r.loss.tau.to_string(),
            "label_smoothing" => r.loss.smoothing.to_string(),
            "stages" => join(&r.stages),
            "sigma_low" => r.mask.sigma_low.to_string(),
            "sigma_high" => r.mask.sigma_high.to_string(),
            "high_weight" => r.mask.high_weight.to_string(),
            "pool_factors" => join(&r.pool_factors),
            "no_fft" => r.no_fft.to_string(),
            "no_filter" => r.no_filter.to_string(),
            "no_downsample" => r.no_downsample.to_string(),
            "align_mode" => r.align_mode.to_string(),
            "lr" => r.lr.to_string(),
            "beta1" => r.adamw.beta1.to_string(),
            "beta2" => r.adamw.beta2.to_string(),
            "weight_decay" => r.adamw.weight_decay.to_string(),
            "eps" => r.adamw.eps.to_string(),
            "warmup_fraction" => r.warmup_fraction.to_string(),
            "grad_clip" => r.grad_clip.to_string(),
            "seed" => r.seed.to_string(),
            "epochs" => r.epochs.to_string(),
            "batch_size" => r.batch_size.to_string(),
            "augment" => augment_string(r.augment),
            "checkpoint_every" => r.checkpoint_every.to_string(),
            "probe_size" => r.probe_size.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Applies a config file's assignments on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", no + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at("unterminated section header".into()))?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(at(format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let home = section_of(key).ok_or_else(|| at(format!("unknown key `{key}`")))?;
            if let Some(s) = &section {
                if s != home {
                    return Err(at(format!("`{key}` belongs in [{home}], not [{s}]")));
                }
            }
            self.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Full config in file syntax; parsing it reproduces `self`.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe.validate()?;
        for spec in [&self.teacher, &self.student] {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.teacher_epochs == 0 || !(self.teacher_lr > 0.0) {
            return Err(Error::Config("teacher_epochs and teacher_lr must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = Config::default();
        let r = &c.recipe;
        assert_eq!((r.adamw.beta1, r.adamw.beta2, r.adamw.weight_decay, r.adamw.eps), (0.9, 0.999, 0.005, 1e-8));
        assert_eq!((r.grad_clip, r.loss.smoothing), (5.0, 0.1));
        assert_eq!((r.loss.lambda_kl, r.loss.lambda_ce), (0.4, 0.3));
        assert_eq!(r.stages, vec![1, 2, 3, 4]);
        c.validate().unwrap();
    }

    #[test]
    fn parse_sections_comments_and_lists() {
        let c = Config::parse(
            "# run\nseed = 9\n[loss]\nlambda_kl = 0.5 # more KD\n\n[align]\nstages = 2, 3,4\nalign_mode = bilinear\n[train]\naugment = flip,jitter\n",
        )
        .unwrap();
        assert_eq!(c.recipe.seed, 9);
        assert_eq!(c.recipe.loss.lambda_kl, 0.5);
        assert_eq!(c.recipe.stages, vec![2, 3, 4]);
        assert_eq!(c.recipe.align_mode, AlignMode::Interp(InterpMode::Bilinear));
        assert!(c.recipe.augment.flip && !c.recipe.augment.crop && c.recipe.augment.jitter);
    }

    #[test]
    fn misplaced_and_unknown_keys() {
        assert!(Config::parse("[loss]\nlr = 0.1\n").is_err());
        assert!(Config::parse("bogus = 1\n").is_err());
        assert!(Config::parse("[nowhere]\n").is_err());
        assert!(Config::parse("lr 0.1\n").is_err());
        assert!(Config::parse("lr = fast\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.apply_override("lambda_kl=0.4").unwrap();
        c.apply_override("student_family=MLP").unwrap();
        c.apply_override("align_mode=random_init_frozen").unwrap();
        c.apply_override("augment=flip,crop").unwrap();
        c.apply_override("sigma_low=0.3").unwrap();
        let text = c.echo();
        assert!(text.contains("lambda_kl = 0.4"));
        assert_eq!(Config::parse(&text).unwrap(), c);
    }

    #[test]
    fn recipe_preconditions() {
        let mut c = Config::default();
        c.set("stages", "3,1").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("lambda_kl", "0.9").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("grad_clip", "0").unwrap();
        assert!(c.validate().is_err());
        // pure KD: MSE weight zero with a non-empty stage set
        let mut c = Config::default();
        c.set("lambda_kl", "1").unwrap();
        c.set("lambda_ce", "0").unwrap();
        c.validate().unwrap();
    }
}
