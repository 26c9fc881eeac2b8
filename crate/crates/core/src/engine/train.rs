//! Teacher pretraining, distillation and evaluation loops.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::data::{augment, AugmentFlags, Dataset};
use crate::error::{Error, Result};
use crate::fam::{fam_forward, fam_forward_frozen, fam_init, interp_align, FamOutput, FamParams, FamSpec};
use crate::feature::{Source, StageFeature};
use crate::ftm::{flatten_grid, ftm_forward, FtmOutput};
use crate::layout::Layout;
use crate::losses::{cross_entropy_smoothed, total_loss, LossBreakdown};
use crate::params::{Bindings, ParameterRegistry};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor};
use crate::zoo::{Model, ModelSpec, NUM_STAGES};

use super::checkpoint::Checkpoint;
use super::metrics::{cosine, mean_defined, nearest_resize, pearson, EpochRecord, RunReport, StageRecord};
use super::optim::{clip_global_norm, lr_schedule, AdamW, AdamWConfig};
use super::recipe::{AlignMode, Config, DistillRecipe};

const TEACHER_INIT: u64 = 0x7eac;
const STUDENT_INIT: u64 = 0x57d7;
const FAM_INIT: u64 = 0xfa3;
const SHUFFLE: u64 = 0x5f1;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub smoothing: f64,
    pub augment: AugmentFlags,
}

impl PretrainConfig {
    pub fn from_config(c: &Config) -> Self {
        let r = &c.recipe;
        Self {
            epochs: c.teacher_epochs,
            lr: c.teacher_lr,
            batch_size: r.batch_size,
            seed: r.seed,
            adamw: r.adamw,
            warmup_fraction: r.warmup_fraction,
            grad_clip: r.grad_clip,
            smoothing: r.loss.smoothing,
            augment: r.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Shuffled mini-batches of the training split for `epoch`.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx = train.to_vec();
    SeededRng::keyed(seed, &[SHUFFLE, epoch as u64]).shuffle(&mut idx);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn argmax_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Top-1 accuracy on `indices`.
pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk);
        hits += argmax_hits(&model.logits(&x)?, &y);
    }
    Ok(hits as f64 / indices.len() as f64)
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("non-finite value produced by {op}")),
        other => other,
    }
}

fn check_dataset(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    if ds.num_classes != spec.num_classes {
        return Err(Error::invalid(format!(
            "model has {} classes, dataset {}",
            spec.num_classes, ds.num_classes
        )));
    }
    if ds.image_size() != spec.image_size {
        return Err(Error::invalid(format!(
            "model expects {}px images, dataset has {}px",
            spec.image_size,
            ds.image_size()
        )));
    }
    if ds.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    Ok(())
}

/// Trains a teacher with label-smoothed cross-entropy and returns it frozen.
pub fn pretrain_teacher(spec: &ModelSpec, ds: &Dataset, cfg: &PretrainConfig) -> Result<(Model, Vec<PretrainEpoch>)> {
    check_dataset(spec, ds)?;
    let mut model = Model::init(spec.clone(), &mut SeededRng::keyed(cfg.seed, &[TEACHER_INIT]))?;
    let mut opt = AdamW::new(cfg.adamw);
    let steps_per_epoch = ds.train.len().div_ceil(cfg.batch_size);
    let horizon = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_fraction * horizon as f64).round() as usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in epoch_batches(&ds.train, cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = ds.batch(&batch);
            let x = augment(&x, &batch, cfg.augment, cfg.seed, epoch as u64);
            let tape = Tape::new();
            let b = model.registry.bind(&tape);
            let out = model
                .forward_with_taps(&b, tape.constant(x), Source::Teacher)
                .map_err(diverged)?;
            let loss = cross_entropy_smoothed(out.logits, &y, cfg.smoothing).map_err(diverged)?;
            let lv = loss.value().data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("teacher loss became {lv} at epoch {epoch}")));
            }
            loss_sum += lv * batch.len() as f64;
            hits += argmax_hits(&out.logits.value(), &y);
            let grads = tape.backward(loss)?;
            model.registry.absorb_grads(&b, &grads)?;
            drop(b);
            clip_global_norm(&mut [&mut model.registry], cfg.grad_clip);
            step += 1;
            opt.step(&mut [("teacher", &mut model.registry)], lr_schedule(step, warmup, horizon, cfg.lr))?;
        }
        history.push(PretrainEpoch {
            epoch: epoch + 1,
            loss: loss_sum / ds.train.len() as f64,
            train_acc: hits as f64 / ds.train.len() as f64,
            val_acc: evaluate(&model, ds, &ds.val, cfg.batch_size)?,
        });
    }
    model.registry.freeze();
    Ok((model, history))
}

/// Alignment state for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageAlign {
    pub stage: usize,
    /// Teacher target `(N, C)`.
    pub target: (usize, usize),
    /// Present for learnable and frozen-random adapters.
    pub fam: Option<FamParams>,
}

/// Teacher, student and per-stage aligners for one distillation run.
pub struct Distiller<'a> {
    pub teacher: &'a Model,
    pub student: Model,
    pub aligns: Vec<StageAlign>,
    pub recipe: DistillRecipe,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Model,
    pub aligns: Vec<StageAlign>,
    pub report: RunReport,
}

impl DistillOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        build_checkpoint(&self.student, &self.aligns)
    }

}

impl<'a> Distiller<'a> {
    /// Rebuilds a distiller from a student checkpoint written by
    /// [`Distiller::checkpoint`], for evaluation and analysis.
    pub fn restore(teacher: &'a Model, recipe: &DistillRecipe, ckpt: &Checkpoint) -> Result<Self> {
        let student = ckpt.to_model()?;
        let mut d = Distiller::new(teacher, &student.spec, recipe)?;
        d.student = student;
        for a in d.aligns.iter_mut() {
            if let Some(f) = a.fam.as_mut() {
                let stored = ckpt.registry(&format!("fam{}", a.stage))?;
                for (path, p) in f.registry.iter_mut() {
                    let t = stored
                        .get(path)
                        .ok_or_else(|| Error::invalid(format!("checkpoint lacks fam{}/{path}", a.stage)))?;
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::invalid(format!("fam{}/{path} has the wrong shape", a.stage)));
                    }
                    p.tensor = t.clone();
                }
            }
        }
        Ok(d)
    }

    /// Teacher targets and aligned student outputs for each aligned stage.
    pub fn aligned_pairs(&self, x: &Tensor) -> Result<Vec<(FtmOutput, Tensor)>> {
        let (_, targets, _) = self.teacher_pass(x, true)?;
        let tape = Tape::new();
        let sb = self.student.registry.bind_frozen(&tape);
        let out = self
            .student
            .forward_with_taps(&sb, tape.constant(x.clone()), Source::Student)?;
        self.aligns
            .iter()
            .zip(targets)
            .map(|(a, t)| Ok((t, (*self.align(a, &out.taps[a.stage - 1], None)?.var.value()).clone())))
            .collect()
    }
}

fn build_checkpoint(student: &Model, aligns: &[StageAlign]) -> Checkpoint {
    let mut c = Checkpoint::from_model(student);
    for a in aligns {
        if let Some(f) = &a.fam {
            c.push_registry(&format!("fam{}", a.stage), &f.registry);
        }
    }
    c
}

fn flatten_sample(t: &Tensor, layout: Layout) -> Result<Tensor> {
    match layout {
        Layout::Seq => Ok(t.clone()),
        Layout::Grid => flatten_grid(t),
    }
}

impl<'a> Distiller<'a> {
    pub fn new(teacher: &'a Model, student_spec: &ModelSpec, recipe: &DistillRecipe) -> Result<Self> {
        recipe.validate()?;
        student_spec.validate()?;
        if teacher.spec.num_classes != student_spec.num_classes || teacher.spec.image_size != student_spec.image_size {
            return Err(Error::invalid("teacher and student disagree on classes or input size"));
        }
        if let AlignMode::Interp(m) = recipe.align_mode {
            if !m.supports(student_spec.layout()) {
                return Err(Error::invalid(format!(
                    "{m} resize does not apply to a {} student",
                    student_spec.family
                )));
            }
        }
        let student = Model::init(student_spec.clone(), &mut SeededRng::keyed(recipe.seed, &[STUDENT_INIT]))?;
        let mut aligns = Vec::new();
        for &stage in &recipe.stages {
            let t_shape = teacher.spec.stage_shape(stage, 1);
            let target = recipe.ftm_config(stage).output_extents(&t_shape, teacher.spec.layout())?;
            let fam = match recipe.align_mode {
                AlignMode::Interp(_) => None,
                mode => {
                    let spec = FamSpec::for_feature(
                        &student_spec.stage_shape(stage, 1),
                        student_spec.layout(),
                        target.0,
                        target.1,
                        !recipe.no_fft,
                    )?;
                    let mut p = fam_init(spec, &mut SeededRng::keyed(recipe.seed, &[FAM_INIT, stage as u64]))?;
                    if mode == AlignMode::RandomInitFrozen {
                        p.registry.freeze();
                    }
                    Some(p)
                }
            };
            aligns.push(StageAlign { stage, target, fam });
        }
        Ok(Self {
            teacher,
            student,
            aligns,
            recipe: recipe.clone(),
        })
    }

    fn uses_features(&self) -> bool {
        self.recipe.loss.lambda_mse().abs() > 1e-15
    }

    fn uses_teacher(&self) -> bool {
        self.uses_features() || self.recipe.loss.lambda_kl != 0.0
    }

    /// Teacher logits and unified targets for the aligned stages.
    fn teacher_pass(&self, x: &Tensor, with_targets: bool) -> Result<(Tensor, Vec<FtmOutput>, [Tensor; NUM_STAGES])> {
        let tape = Tape::new();
        let b = self.teacher.registry.bind_frozen(&tape);
        let out = self
            .teacher
            .forward_with_taps(&b, tape.constant(x.clone()), Source::Teacher)?;
        let mut targets = Vec::new();
        if with_targets {
            for a in &self.aligns {
                targets.push(ftm_forward(&out.taps[a.stage - 1], &self.recipe.ftm_config(a.stage))?);
            }
        }
        let raw = out.taps.map(|t| (*t.var.value()).clone());
        Ok(((*out.logits.value()).clone(), targets, raw))
    }

    fn align<'t>(&self, a: &StageAlign, tap: &StageFeature<'t>, fam_b: Option<&Bindings<'t>>) -> Result<FamOutput<'t>> {
        match (self.recipe.align_mode, &a.fam) {
            (AlignMode::Interp(m), _) => interp_align(tap, m, a.target.0, a.target.1),
            (AlignMode::RandomInitFrozen, Some(p)) => fam_forward_frozen(tap, p),
            (AlignMode::Fam, Some(p)) => match fam_b {
                Some(b) => fam_forward(tap, p, b),
                None => fam_forward_frozen(tap, p),
            },
            _ => Err(Error::contract("aligner state does not match the align mode")),
        }
    }

    /// One optimization step; returns the loss breakdown and hit count.
    fn train_step(
        &mut self,
        x: &Tensor,
        y: &[usize],
        cached: Option<(Tensor, Vec<FtmOutput>)>,
        opt: &mut AdamW,
        lr: f64,
    ) -> Result<(LossBreakdown, usize)> {
        let features = self.uses_features();
        let (z_t, targets) = if let Some(c) = cached {
            c
        } else if self.uses_teacher() {
            let (z, t, _) = self.teacher_pass(x, features)?;
            (z, t)
        } else {
            let zeros = Tensor::zeros([y.len(), self.student.spec.num_classes]);
            (zeros, Vec::new())
        };
        let tape = Tape::new();
        let sb = self.student.registry.bind(&tape);
        let fam_b: Vec<Option<Bindings<'_>>> = self
            .aligns
            .iter()
            .map(|a| a.fam.as_ref().filter(|_| features).map(|f| f.registry.bind(&tape)))
            .collect();
        let out = self
            .student
            .forward_with_taps(&sb, tape.constant(x.clone()), Source::Student)?;
        let mut pairs = Vec::new();
        if features {
            for ((a, t), fb) in self.aligns.iter().zip(targets).zip(&fam_b) {
                let s = self.align(a, &out.taps[a.stage - 1], fb.as_ref())?;
                pairs.push((t, s));
            }
        }
        let (loss, breakdown) = total_loss(&pairs, &z_t, out.logits, y, &self.recipe.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged(format!("loss became {}", breakdown.total)));
        }
        let hits = argmax_hits(&out.logits.value(), y);
        let grads = tape.backward(loss)?;
        self.student.registry.absorb_grads(&sb, &grads)?;
        for (a, fb) in self.aligns.iter_mut().zip(&fam_b) {
            if let (Some(f), Some(b)) = (a.fam.as_mut(), fb) {
                f.registry.absorb_grads(b, &grads)?;
            }
        }
        drop(fam_b);
        drop(sb);
        let mut names: Vec<String> = vec!["student".into()];
        let mut regs: Vec<&mut ParameterRegistry> = vec![&mut self.student.registry];
        for a in self.aligns.iter_mut().filter(|_| features) {
            if let Some(f) = a.fam.as_mut() {
                names.push(format!("fam{}", a.stage));
                regs.push(&mut f.registry);
            }
        }
        clip_global_norm(&mut regs, self.recipe.grad_clip);
        let mut groups: Vec<(&str, &mut ParameterRegistry)> =
            names.iter().map(String::as_str).zip(regs).collect();
        opt.step(&mut groups, lr)?;
        Ok((breakdown, hits))
    }

    /// Per-stage cosine and Pearson similarity on a fixed probe batch, for
    /// raw features (flattened, student resized by nearest to the teacher
    /// length) and for the aligned pairs.
    pub fn similarity_probe(&self, x: &Tensor) -> Result<Vec<StageRecord>> {
        let features = self.uses_features();
        let (_, targets, t_raw) = self.teacher_pass(x, features)?;
        let tape = Tape::new();
        let sb = self.student.registry.bind_frozen(&tape);
        let out = self
            .student
            .forward_with_taps(&sb, tape.constant(x.clone()), Source::Student)?;
        let batch = x.shape()[0];
        let mut records = Vec::new();
        for (i, a) in self.aligns.iter().enumerate() {
            let t = flatten_sample(&t_raw[a.stage - 1], self.teacher.spec.layout())?;
            let s = flatten_sample(&out.taps[a.stage - 1].var.value(), self.student.spec.layout())?;
            let (lt, ls) = (t.numel() / batch, s.numel() / batch);
            let raw: Vec<(Option<f64>, Option<f64>)> = (0..batch)
                .map(|b| {
                    let tv = &t.data()[b * lt..(b + 1) * lt];
                    let sv = nearest_resize(&s.data()[b * ls..(b + 1) * ls], lt);
                    (cosine(tv, &sv), pearson(tv, &sv))
                })
                .collect();
            let post: Vec<(Option<f64>, Option<f64>)> = if features {
                let aligned = self.align(a, &out.taps[a.stage - 1], None)?.var.value();
                let tt = &targets[i].tensor;
                let l = tt.numel() / batch;
                (0..batch)
                    .map(|b| {
                        let (tv, sv) = (&tt.data()[b * l..(b + 1) * l], &aligned.data()[b * l..(b + 1) * l]);
                        (cosine(tv, sv), pearson(tv, sv))
                    })
                    .collect()
            } else {
                Vec::new()
            };
            records.push(StageRecord {
                stage: a.stage,
                mse: None,
                cos_raw: mean_defined(raw.iter().map(|r| r.0)),
                pearson_raw: mean_defined(raw.iter().map(|r| r.1)),
                cos_uhkd: mean_defined(post.iter().map(|r| r.0)),
                pearson_uhkd: mean_defined(post.iter().map(|r| r.1)),
            });
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        build_checkpoint(&self.student, &self.aligns)
    }

    /// Runs the full schedule. With `out_dir`, the checkpoint and the
    /// metrics CSV are rewritten at the configured cadence; a divergence
    /// leaves the last good checkpoint in place.
    pub fn run(mut self, ds: &Dataset, out_dir: Option<&Path>) -> Result<DistillOutcome> {
        check_dataset(&self.student.spec, ds)?;
        let start = Instant::now();
        let r = self.recipe.clone();
        let teacher_digest = self.teacher.registry.digest();
        let probe: Vec<usize> = ds.val.iter().take(r.probe_size).copied().collect();
        let probe_x = (!probe.is_empty()).then(|| ds.batch(&probe).0);
        let steps_per_epoch = ds.train.len().div_ceil(r.batch_size);
        let horizon = r.epochs * steps_per_epoch;
        let warmup = (r.warmup_fraction * horizon as f64).round() as usize;
        let mut opt = AdamW::new(r.adamw);
        let cache = if self.uses_teacher() && !r.augment.any() {
            Some(TeacherCache::build(&self, ds, &ds.train)?)
        } else {
            None
        };
        let mut epochs = Vec::with_capacity(r.epochs);
        let mut step = 0;
        for epoch in 0..r.epochs {
            let mut acc = LossAccumulator::default();
            let mut hits = 0;
            for batch in epoch_batches(&ds.train, r.batch_size, r.seed, epoch) {
                let (x, y) = ds.batch(&batch);
                let x = augment(&x, &batch, r.augment, r.seed, epoch as u64);
                step += 1;
                let lr = lr_schedule(step, warmup, horizon, r.lr);
                let cached = cache.as_ref().map(|c| c.gather(&batch));
                let (b, h) = self.train_step(&x, &y, cached, &mut opt, lr).map_err(diverged)?;
                acc.add(&b, batch.len());
                hits += h;
            }
            let mut stages = match &probe_x {
                Some(px) => self.similarity_probe(px)?,
                None => Vec::new(),
            };
            for s in stages.iter_mut() {
                s.mse = acc.stage_mean(s.stage);
            }
            epochs.push(EpochRecord {
                epoch: epoch + 1,
                train_acc: hits as f64 / ds.train.len() as f64,
                val_acc: evaluate(&self.student, ds, &ds.val, r.batch_size)?,
                loss: acc.mean(&r),
                stages,
            });
            if let Some(dir) = out_dir {
                if (epoch + 1) % r.checkpoint_every == 0 || epoch + 1 == r.epochs {
                    self.checkpoint().save(&dir.join("student.ckpt"))?;
                    let partial = RunReport {
                        epochs: epochs.clone(),
                        wall_clock: start.elapsed(),
                        checkpoint_digest: String::new(),
                    };
                    std::fs::write(dir.join("metrics.csv"), partial.to_csv())?;
                }
            }
        }
        if self.teacher.registry.digest() != teacher_digest {
            return Err(Error::contract("teacher parameters changed during distillation"));
        }
        let bytes = self.checkpoint().to_bytes()?;
        let digest = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        Ok(DistillOutcome {
            student: self.student,
            aligns: self.aligns,
            report: RunReport {
                epochs,
                wall_clock: start.elapsed(),
                checkpoint_digest: digest,
            },
        })
    }
}

/// Teacher logits and targets for every training sample, reused across
/// epochs when inputs are not augmented.
struct TeacherCache {
    row: HashMap<usize, usize>,
    logits: Tensor,
    targets: Vec<FtmOutput>,
}

impl TeacherCache {
    fn build(d: &Distiller<'_>, ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let features = d.uses_features();
        let mut logits = Vec::new();
        let mut targets: Vec<Vec<f64>> = vec![Vec::new(); if features { d.aligns.len() } else { 0 }];
        let mut shapes = Vec::new();
        for chunk in indices.chunks(d.recipe.batch_size.max(1)) {
            let (x, _) = ds.batch(chunk);
            let (z, t, _) = d.teacher_pass(&x, features)?;
            logits.extend_from_slice(z.data());
            shapes = t.iter().map(|o| o.tensor.shape()[1..].to_vec()).collect();
            for (acc, o) in targets.iter_mut().zip(&t) {
                acc.extend_from_slice(o.tensor.data());
            }
        }
        let n = indices.len();
        let k = d.teacher.spec.num_classes;
        let targets = targets
            .into_iter()
            .zip(&shapes)
            .zip(&d.aligns)
            .map(|((data, s), a)| {
                Ok(FtmOutput {
                    tensor: Tensor::new([n, s[0], s[1]], data)?,
                    stage: a.stage,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            row: indices.iter().enumerate().map(|(r, &i)| (i, r)).collect(),
            logits: Tensor::new([n, k], logits)?,
            targets,
        })
    }

    fn gather(&self, batch: &[usize]) -> (Tensor, Vec<FtmOutput>) {
        let rows = |t: &Tensor| {
            let mut shape = t.shape().to_vec();
            let w = t.numel() / shape[0];
            shape[0] = batch.len();
            let mut data = Vec::with_capacity(batch.len() * w);
            for i in batch {
                let r = self.row[i];
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            Tensor::new(shape, data).expect("row gather keeps the extents")
        };
        let targets = self
            .targets
            .iter()
            .map(|o| FtmOutput {
                tensor: rows(&o.tensor),
                stage: o.stage,
            })
            .collect();
        (rows(&self.logits), targets)
    }
}

/// Convenience wrapper: build a [`Distiller`] and run it.
pub fn distill(
    teacher: &Model,
    student_spec: &ModelSpec,
    recipe: &DistillRecipe,
    ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    Distiller::new(teacher, student_spec, recipe)?.run(ds, out_dir)
}

#[derive(Default)]
struct LossAccumulator {
    n: usize,
    mse: f64,
    kl: f64,
    ce: f64,
    total: f64,
    stages: Vec<(usize, f64)>,
}

impl LossAccumulator {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.n += n;
        self.mse += b.mse * w;
        self.kl += b.kl * w;
        self.ce += b.ce * w;
        self.total += b.total * w;
        for &(s, m) in &b.per_stage_mse {
            match self.stages.iter_mut().find(|(st, _)| *st == s) {
                Some(e) => e.1 += m * w,
                None => self.stages.push((s, m * w)),
            }
        }
    }

    fn stage_mean(&self, stage: usize) -> Option<f64> {
        self.stages
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, v)| v / self.n as f64)
    }

    fn mean(&self, r: &DistillRecipe) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            mse: self.mse / n,
            kl: self.kl / n,
            ce: self.ce / n,
            total: self.total / n,
            lambda_kl: r.loss.lambda_kl,
            lambda_ce: r.loss.lambda_ce,
            tau: r.loss.tau,
            per_stage_mse: self.stages.iter().map(|&(s, v)| (s, v / n)).collect(),
        }
    }
}
