//! `uhkd`: teacher pretraining, distillation, evaluation, ablation sweeps and
//! feature analysis from one config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uhkd::data::{load_external, synth_dataset};
use uhkd::engine::train::PretrainConfig;
use uhkd::engine::{evaluate, run_ablation_suite, suite_csv, Arm, ArmStatus, Checkpoint, Config, Distiller};
use uhkd::spectral::dump::SpectrumDump;
use uhkd::{pretrain_teacher, Dataset, Error, Model};

const TEACHER_CKPT: &str = "teacher.ckpt";
const STUDENT_CKPT: &str = "student.ckpt";

#[derive(Parser, Debug)]
#[command(name = "uhkd", version, about = "Frequency-domain heterogeneous knowledge distillation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file (`key = value` lines, `[section]` headers, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Every file a verb writes goes under this directory.
    #[arg(long, global = true, default_value = "uhkd-out")]
    out_dir: PathBuf,
    /// `key=value` override applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train the teacher with cross-entropy and save `teacher.ckpt`.
    Pretrain(Common),
    /// Distill a student from the teacher checkpoint (pretraining it first
    /// when absent); writes `student.ckpt` and `metrics.csv`.
    Distill(Common),
    /// Print the validation accuracy of a student checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out-dir>/student.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the ablation arms and write `ablation.csv`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds per arm, starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Dump teacher targets and aligned student outputs of the probe batch
    /// as `UHKDSPEC` files under `<out-dir>/inspect`.
    Inspect(Common),
    /// Write per-stage raw and aligned similarity to `similarity.csv`.
    Similarity(Common),
}

impl Verb {
    fn common(&self) -> &Common {
        match self {
            Verb::Pretrain(c) | Verb::Distill(c) | Verb::Inspect(c) | Verb::Similarity(c) => c,
            Verb::Eval { common, .. } | Verb::Ablate { common, .. } => common,
        }
    }
}

/// Failure classes with their exit codes.
enum Fail {
    Config(String),
    Runtime(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Fail::Config(e.to_string()),
            other => Fail::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Config(m)) => {
            eprintln!("uhkd: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Runtime(m)) => {
            eprintln!("uhkd: {m}");
            ExitCode::from(3)
        }
    }
}

fn resolve(c: &Common) -> Result<Config, Fail> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for s in &c.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.recipe.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &Config) -> Result<Dataset, Fail> {
    Ok(match &cfg.data.manifest {
        Some(m) => load_external(m.parent().unwrap_or(Path::new(".")), m)?,
        None => synth_dataset(&cfg.data.synth)?,
    })
}

fn run(cli: Cli) -> Result<(), Fail> {
    let common = cli.verb.common().clone();
    let cfg = resolve(&common)?;
    if common.dry_run {
        print!("{}", cfg.echo());
        return Ok(());
    }
    let out = &common.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.echo())?;
    let ds = dataset(&cfg)?;
    match cli.verb {
        Verb::Pretrain(_) => {
            pretrain(&cfg, &ds, out)?;
        }
        Verb::Distill(_) => {
            let teacher = teacher(&cfg, &ds, out)?;
            let outcome = Distiller::new(&teacher, &cfg.student, &cfg.recipe)?.run(&ds, Some(out))?;
            let r = &outcome.report;
            println!("val_acc {}", r.final_val_acc());
            println!("checkpoint_sha256 {}", r.checkpoint_digest);
        }
        Verb::Eval { checkpoint, .. } => {
            let path = checkpoint.unwrap_or_else(|| out.join(STUDENT_CKPT));
            let model = load_ckpt(&path)?.to_model()?;
            println!("val_acc {}", evaluate(&model, &ds, &ds.val, cfg.recipe.batch_size)?);
        }
        Verb::Ablate { seeds, .. } => {
            let teacher = teacher(&cfg, &ds, out)?;
            let subsets = [vec![1], vec![2], vec![3], vec![4], vec![2, 3, 4]];
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.recipe.seed + s).collect();
            let results = run_ablation_suite(&teacher, &cfg.student, &cfg.recipe, &ds, &Arm::suite(&subsets), &seeds, |r| {
                let status = match &r.status {
                    ArmStatus::Done(rep) => format!("val_acc {:.4}", rep.final_val_acc()),
                    ArmStatus::Skipped(why) => format!("skipped ({why})"),
                    ArmStatus::Failed(why) => format!("failed ({why})"),
                };
                println!("{:<20} seed {:<4} {status}", r.arm.name(), r.seed);
            });
            fs::write(out.join("ablation.csv"), suite_csv(&results))?;
        }
        Verb::Inspect(_) => {
            let teacher = load_teacher(out)?;
            let d = Distiller::restore(&teacher, &cfg.recipe, &load_ckpt(&out.join(STUDENT_CKPT))?)?;
            let dir = out.join("inspect");
            fs::create_dir_all(&dir)?;
            let (x, _) = ds.batch(&probe(&cfg, &ds));
            for (t, s) in d.aligned_pairs(&x)? {
                for (name, tensor) in [("ftm", &t.tensor), ("fam", &s)] {
                    let path = dir.join(format!("stage{}_{name}.spec", t.stage));
                    fs::write(&path, SpectrumDump::from_real(tensor).to_bytes())?;
                    println!("{}", path.display());
                }
            }
        }
        Verb::Similarity(_) => {
            let teacher = load_teacher(out)?;
            let d = Distiller::restore(&teacher, &cfg.recipe, &load_ckpt(&out.join(STUDENT_CKPT))?)?;
            let (x, _) = ds.batch(&probe(&cfg, &ds));
            let mut csv = String::from("stage,cos_raw,cos_uhkd,pearson_raw,pearson_uhkd\n");
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for s in d.similarity_probe(&x)? {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    s.stage,
                    cell(s.cos_raw),
                    cell(s.cos_uhkd),
                    cell(s.pearson_raw),
                    cell(s.pearson_uhkd)
                );
            }
            fs::write(out.join("similarity.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn probe(cfg: &Config, ds: &Dataset) -> Vec<usize> {
    ds.val.iter().take(cfg.recipe.probe_size.max(1)).copied().collect()
}

fn pretrain(cfg: &Config, ds: &Dataset, out: &Path) -> Result<Model, Fail> {
    let (model, history) = pretrain_teacher(&cfg.teacher, ds, &PretrainConfig::from_config(cfg))?;
    let mut csv = String::from("epoch,loss,train_acc,val_acc\n");
    for h in &history {
        let _ = writeln!(csv, "{},{},{},{}", h.epoch, h.loss, h.train_acc, h.val_acc);
        println!("epoch {:>3} loss {:.4} train_acc {:.4} val_acc {:.4}", h.epoch, h.loss, h.train_acc, h.val_acc);
    }
    fs::write(out.join("teacher_metrics.csv"), csv)?;
    Checkpoint::from_model(&model).save(&out.join(TEACHER_CKPT))?;
    Ok(model)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Fail> {
    if !path.is_file() {
        return Err(Fail::Runtime(format!("{} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_teacher(out: &Path) -> Result<Model, Fail> {
    let mut m = load_ckpt(&out.join(TEACHER_CKPT))?.to_model()?;
    m.registry.freeze();
    Ok(m)
}

/// The saved teacher when it matches the config, otherwise a fresh pretrain.
fn teacher(cfg: &Config, ds: &Dataset, out: &Path) -> Result<Model, Fail> {
    if out.join(TEACHER_CKPT).exists() {
        let m = load_teacher(out)?;
        if m.spec == cfg.teacher {
            return Ok(m);
        }
        return Err(Fail::Config(format!(
            "{} was trained for a different teacher spec; remove it or use another --out-dir",
            out.join(TEACHER_CKPT).display()
        )));
    }
    pretrain(cfg, ds, out)
}
