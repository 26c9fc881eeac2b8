//! Ablation arms and the suite runner.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::fam::InterpMode;
use crate::zoo::{Model, ModelSpec};

use super::metrics::RunReport;
use super::recipe::{AlignMode, DistillRecipe};
use super::train::distill;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arm {
    Full,
    CeOnly,
    /// Logit distillation only: no feature term.
    KdOnly,
    NoFft,
    NoFilter,
    NoDownsample,
    Interp(InterpMode),
    RandomInitFrozen,
    Stages(Vec<usize>),
}

impl Arm {
    /// The ten fixed arms, before any stage subsets.
    pub fn fixed() -> Vec<Arm> {
        vec![
            Arm::Full,
            Arm::CeOnly,
            Arm::KdOnly,
            Arm::NoFft,
            Arm::NoFilter,
            Arm::NoDownsample,
            Arm::Interp(InterpMode::Bilinear),
            Arm::Interp(InterpMode::Nearest),
            Arm::Interp(InterpMode::Linear),
            Arm::RandomInitFrozen,
        ]
    }

    pub fn suite(subsets: &[Vec<usize>]) -> Vec<Arm> {
        let mut arms = Arm::fixed();
        arms.extend(subsets.iter().cloned().map(Arm::Stages));
        arms
    }

    pub fn name(&self) -> String {
        match self {
            Arm::Full => "full".into(),
            Arm::CeOnly => "ce_only".into(),
            Arm::KdOnly => "kd_only".into(),
            Arm::NoFft => "no_fft".into(),
            Arm::NoFilter => "no_filter".into(),
            Arm::NoDownsample => "no_downsample".into(),
            Arm::Interp(m) => m.to_string(),
            Arm::RandomInitFrozen => "random_init_frozen".into(),
            Arm::Stages(s) => format!("stages_{}", s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("")),
        }
    }

    /// Which comparison the arm belongs to.
    pub fn group(&self) -> &'static str {
        match self {
            Arm::Full => "reference",
            Arm::CeOnly | Arm::KdOnly => "baseline",
            Arm::NoFft | Arm::NoFilter => "frequency",
            Arm::NoDownsample => "downsampling",
            Arm::Interp(_) | Arm::RandomInitFrozen => "alignment",
            Arm::Stages(_) => "branches",
        }
    }

    pub fn apply(&self, base: &DistillRecipe) -> DistillRecipe {
        let mut r = base.clone();
        match self {
            Arm::Full => {}
            Arm::CeOnly => {
                r.loss.lambda_kl = 0.0;
                r.loss.lambda_ce = 1.0;
            }
            Arm::KdOnly => r.loss.lambda_kl = 1.0 - r.loss.lambda_ce,
            Arm::NoFft => r.no_fft = true,
            Arm::NoFilter => r.no_filter = true,
            Arm::NoDownsample => r.no_downsample = true,
            Arm::Interp(m) => r.align_mode = AlignMode::Interp(*m),
            Arm::RandomInitFrozen => r.align_mode = AlignMode::RandomInitFrozen,
            Arm::Stages(s) => r.stages = s.clone(),
        }
        r
    }

    /// Why the arm cannot run for a student of `spec`, if it cannot.
    pub fn inapplicable(&self, spec: &ModelSpec) -> Option<String> {
        match self {
            Arm::Interp(m) if !m.supports(spec.layout()) => {
                Some(format!("{m} resize does not apply to {} features", spec.layout()))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum ArmStatus {
    Done(Box<RunReport>),
    Skipped(String),
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub status: ArmStatus,
}

impl ArmResult {
    pub fn val_acc(&self) -> Option<f64> {
        match &self.status {
            ArmStatus::Done(r) => Some(r.final_val_acc()),
            _ => None,
        }
    }
}

/// Runs every arm for every seed. Failures are recorded and the suite
/// moves on.
pub fn run_ablation_suite(
    teacher: &Model,
    student: &ModelSpec,
    base: &DistillRecipe,
    ds: &Dataset,
    arms: &[Arm],
    seeds: &[u64],
    mut on_result: impl FnMut(&ArmResult),
) -> Vec<ArmResult> {
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for arm in arms {
        for &seed in seeds {
            let status = match arm.inapplicable(student) {
                Some(why) => ArmStatus::Skipped(why),
                None => {
                    let mut recipe = arm.apply(base);
                    recipe.seed = seed;
                    match distill(teacher, student, &recipe, ds, None) {
                        Ok(o) => ArmStatus::Done(Box::new(o.report)),
                        Err(e) => ArmStatus::Failed(e.to_string()),
                    }
                }
            };
            let r = ArmResult {
                arm: arm.clone(),
                seed,
                status,
            };
            on_result(&r);
            out.push(r);
        }
    }
    out
}

pub const SUITE_HEADER: &str = "arm,group,seed,status,val_acc,mse,kl,ce,digest";

pub fn suite_csv(results: &[ArmResult]) -> String {
    let mut out = format!("{SUITE_HEADER}\n");
    for r in results {
        let (name, group) = (r.arm.name(), r.arm.group());
        let _ = match &r.status {
            ArmStatus::Done(rep) => {
                let last = rep.epochs.last();
                let l = last.map(|e| (e.loss.mse, e.loss.kl, e.loss.ce)).unwrap_or_default();
                writeln!(
                    out,
                    "{name},{group},{},ok,{},{},{},{},{}",
                    r.seed,
                    rep.final_val_acc(),
                    l.0,
                    l.1,
                    l.2,
                    rep.checkpoint_digest
                )
            }
            ArmStatus::Skipped(why) => writeln!(out, "{name},{group},{},skipped: {},,,,,", r.seed, why.replace(',', ";")),
            ArmStatus::Failed(why) => writeln!(out, "{name},{group},{},failed: {},,,,,", r.seed, why.replace(',', ";")),
        };
    }
    out
}
