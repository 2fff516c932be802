use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fncgen_core::checkpoint::Checkpoint;
use fncgen_core::config::{resolve_seed, ConfigFile, SEED_ENV};
use fncgen_core::data::{ground_truth_group_diff, write_fnc, Dataset};
use fncgen_core::eval::{write_matrix_csv, EvalReport};
use fncgen_core::gradcheck::full_suite;
use fncgen_core::train::{run_cv, EpochLog, FoldObserver, RunDir, RunSpec, Trainer};
use fncgen_core::types::ClassLabel;
use fncgen_core::Error;

/// Synthesize functional connectivity matrices from structural volumes with
/// a conditional vision-transformer GAN.
///
/// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
/// The FNCGEN_SEED environment variable overrides the config seed; an
/// explicit --seed overrides both.
#[derive(Parser, Debug)]
#[command(name = "fncgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort and write it as a dataset directory.
    GenData(GenDataArgs),
    /// Train on a dataset with cross-validation and populate a run directory.
    Train(TrainArgs),
    /// Evaluate a trained fold on its held-out subjects.
    Eval(EvalArgs),
    /// Generate one FNC matrix from a subject's volume.
    Synth(SynthArgs),
    /// Check every analytic gradient against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Run every validation step without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// JSON config file; missing sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    /// Cohort seed (overrides FNCGEN_SEED and data.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file; missing sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output run directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    /// Train only this fold of the configured split.
    #[arg(long, conflicts_with = "cv")]
    fold: Option<usize>,
    /// Train all folds of a K-fold split (overrides train.folds).
    #[arg(long, value_name = "K")]
    cv: Option<usize>,
    /// Folds trained in parallel; results do not depend on this value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Training seed (overrides FNCGEN_SEED and train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the class identifier.
    #[arg(long)]
    no_class_id: bool,
    /// Disable the correlation loss.
    #[arg(long)]
    no_corr_loss: bool,
    /// Disable the perceptual loss.
    #[arg(long)]
    no_perc_loss: bool,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by train.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory the run was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Fold whose checkpoint and held-out subjects are used.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Report path [default: <run>/reports/eval_fold<k>.json].
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassArg {
    #[value(name = "HC", alias = "hc")]
    Hc,
    #[value(name = "SZ", alias = "sz")]
    Sz,
}

impl From<ClassArg> for ClassLabel {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Hc => ClassLabel::Hc,
            ClassArg::Sz => ClassLabel::Sz,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Run directory written by train.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory holding the subject.
    #[arg(long)]
    data: PathBuf,
    /// Fold whose checkpoint is used.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Subject identifier from the dataset manifest.
    #[arg(long)]
    subject: String,
    /// Conditioning class [default: the subject's own class].
    #[arg(long, value_enum)]
    class: Option<ClassArg>,
    /// Output .fnc file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for inputs and probe directions (overrides FNCGEN_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Append a deliberately wrong gradient to exercise the failure path.
    #[arg(long, hide = true)]
    inject_broken: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let cfg = ConfigFile::load_or_default(path).map_err(|e| match e {
        Error::Io { path, source } => Failure::Usage(format!("cannot read config {}: {source}", path.display())),
        other => Failure::Core(other),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Checks that `dir` is absent or empty; with `force` it will be replaced.
fn check_out_dir(dir: &Path, force: bool) -> CmdResult {
    let non_empty = match std::fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(dir, e).into()),
    };
    if non_empty && !force {
        return Err(Failure::Usage(format!(
            "{} is not empty; pass --force to replace it",
            dir.display()
        )));
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path, force: bool) -> CmdResult {
    if force && dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.join("manifest.json").exists() {
        return Err(Failure::Usage(format!("{} is not a dataset directory", dir.display())));
    }
    Ok(Dataset::read(dir)?)
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.data.seed = resolve_seed(a.seed, env_seed().as_deref(), cfg.data.seed)?;
    check_out_dir(&a.out, a.force)?;
    if a.common.dry_run {
        println!(
            "dry run: would write {} subjects to {} (seed {})",
            cfg.data.n_subjects,
            a.out.display(),
            cfg.data.seed
        );
        return Ok(());
    }
    let data = Dataset::synthetic(&cfg.data)?;
    prepare_out_dir(&a.out, a.force)?;
    data.write(&a.out)?;
    let gt = data.ground_truth.as_ref().expect("synthetic datasets keep their ground truth");
    let diff = ground_truth_group_diff(gt, cfg.eval.ground_truth_mc, cfg.data.seed)?;
    let n = diff.n;
    let off: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| diff.get(i, j).abs())
        .collect();
    let n_hc = data.labels().iter().filter(|c| **c == ClassLabel::Hc).count();
    println!(
        "wrote {} subjects ({} HC, {} SZ) to {}",
        data.subjects.len(),
        n_hc,
        data.subjects.len() - n_hc,
        a.out.display()
    );
    println!(
        "ground-truth HC-SZ difference: max |d| = {:.4}, mean |d| = {:.4} ({} draws per class)",
        diff.max_abs(),
        off.iter().sum::<f64>() / off.len().max(1) as f64,
        cfg.eval.ground_truth_mc
    );
    Ok(())
}

struct Progress;

impl FoldObserver for Progress {
    fn epoch_done(&self, fold: usize, log: &EpochLog, _trainer: &Trainer<'_>) -> fncgen_core::Result<()> {
        eprintln!(
            "fold {fold} epoch {}: lr {:.1e} d {:.4} g {:.4} pearson {:.4}",
            log.epoch, log.lr, log.d_loss, log.g_total, log.eval_pearson
        );
        Ok(())
    }
}

fn export_csv(report: &EvalReport, base: &Path) -> CmdResult {
    let n = report.real_group_diff.n;
    let stem = base.with_extension("");
    let stem = stem.to_string_lossy();
    write_matrix_csv(Path::new(&format!("{stem}_generated_diff.csv")), &report.generated_group_diff.values, n)?;
    write_matrix_csv(Path::new(&format!("{stem}_real_diff.csv")), &report.real_group_diff.values, n)?;
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.train.seed = resolve_seed(a.seed, env_seed().as_deref(), cfg.train.seed)?;
    if let Some(k) = a.cv {
        cfg.train.folds = k;
    }
    let ab = &mut cfg.train.ablation;
    ab.class_identifier &= !a.no_class_id;
    ab.use_corr_loss &= !a.no_corr_loss;
    ab.use_perceptual_loss &= !a.no_perc_loss;
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be ≥ 1".into()));
    }
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let spec = cfg.run_spec(&data)?;
    let split = spec.split(&data)?;
    let folds: Vec<usize> = match a.fold {
        Some(k) if k >= split.k() => {
            return Err(Failure::Usage(format!("--fold {k} is out of range for {} folds", split.k())))
        }
        Some(k) => vec![k],
        None => (0..split.k()).collect(),
    };
    check_out_dir(&a.out, a.force)?;
    if a.common.dry_run {
        Trainer::new(&data, &split, folds[0], spec.clone())?;
        println!(
            "dry run: would train folds {folds:?} of {} for {} epochs into {}",
            split.k(),
            spec.train.epochs,
            a.out.display()
        );
        return Ok(());
    }
    prepare_out_dir(&a.out, a.force)?;
    let run = RunDir::new(&a.out);
    run.create()?;
    std::fs::write(run.config(), cfg.to_json()).map_err(|e| Error::io(run.config(), e))?;
    run.write_spec(&spec)?;
    let (outcomes, agg) = run_cv(&data, &spec, Some(&folds), a.jobs, &Progress)?;
    for out in &outcomes {
        run.write_fold(out)?;
        if cfg.eval.export_csv {
            export_csv(&out.report, &run.report(out.fold))?;
        }
        println!("fold {}: {}", out.fold, out.report.summary());
    }
    let text = serde_json::to_string_pretty(&agg).expect("aggregate serializes") + "\n";
    std::fs::write(run.aggregate(), text).map_err(|e| Error::io(run.aggregate(), e))?;
    println!(
        "group-difference pearson {:.4} ± {:.4}, cosine {:.4} ± {:.4} over {} fold(s)",
        agg.group_diff_pearson.mean,
        agg.group_diff_pearson.std,
        agg.group_diff_cosine.mean,
        agg.group_diff_cosine.std,
        agg.folds.len()
    );
    Ok(())
}

/// Spec, dataset and checkpoint of one trained fold, cross-checked.
fn load_fold(run: &Path, data_dir: &Path, fold: usize) -> Result<(RunSpec, Dataset, Checkpoint), Failure> {
    let run = RunDir::new(run);
    if !run.spec().exists() {
        return Err(Failure::Usage(format!("{} is not a run directory", run.root.display())));
    }
    let spec = run.read_spec()?;
    let data = read_dataset(data_dir)?;
    spec.check_dataset(&data, data_dir)?;
    let path = run.checkpoint(fold);
    if !path.exists() {
        return Err(Failure::Usage(format!("no checkpoint for fold {fold} at {}", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    spec.load_generator(&ckpt, &path)?;
    Ok((spec, data, ckpt))
}

fn eval(a: EvalArgs) -> CmdResult {
    let (spec, data, ckpt) = load_fold(&a.run, &a.data, a.fold)?;
    let split = spec.split(&data)?;
    let trainer = Trainer::resume(&data, &split, a.fold, spec, &ckpt)?;
    let path = a
        .report
        .unwrap_or_else(|| RunDir::new(&a.run).root.join("reports").join(format!("eval_fold{}.json", a.fold)));
    if a.common.dry_run {
        println!("dry run: would write {}", path.display());
        return Ok(());
    }
    let report = trainer.evaluate()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    report.write(&path)?;
    let cfg = ConfigFile::load_or_default(Some(&RunDir::new(&a.run).config()).filter(|p| p.exists()).map(PathBuf::as_path))?;
    if cfg.eval.export_csv {
        export_csv(&report, &path)?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let (spec, data, ckpt) = load_fold(&a.run, &a.data, a.fold)?;
    let subject = data.find(&a.subject)?;
    let class = a.class.map_or(subject.class, ClassLabel::from);
    let gen = spec.load_generator(&ckpt, &RunDir::new(&a.run).checkpoint(a.fold))?;
    if a.common.dry_run {
        println!("dry run: would write {}", a.out.display());
        return Ok(());
    }
    let fnc = gen.generate(&subject.volume, class)?;
    write_fnc(&a.out, &fnc)?;
    println!(
        "wrote {} ({}x{}, subject {}, class {})",
        a.out.display(),
        fnc.order(),
        fnc.order(),
        subject.id,
        class.name()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let seed = resolve_seed(a.seed, env_seed().as_deref(), 0)?;
    let reports = full_suite(seed, a.inject_broken);
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>12}  {:>9}  result", "case", "max rel err", "tolerance");
    for r in &reports {
        println!(
            "{:<width$}  {:>12.3e}  {:>9.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} cases passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}
