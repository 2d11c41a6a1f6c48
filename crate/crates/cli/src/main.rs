use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use unirecon::io_store::{load_checkpoint, Checkpoint, EvalRecord, RunManifest, Stage, Variant, RUN_MANIFEST};
use unirecon::kspace::DcMode;
use unirecon::phantom_data::{generate_dataset, load_dataset, save_dataset, AnatomyData, AnatomyProfile, Split};
use unirecon::recon_net::{Architecture, ParamScope};
use unirecon::report::{build_report, render_csv, render_text};
use unirecon::train_pipeline::{
    adapt_new_anatomy, distill_universal, evaluate, pretrain_universal, train_independent, train_shared, EvalSpec,
    Reconstructor, StageOutput, Teacher, TrainConfig,
};

/// Universal undersampled MRI reconstruction on synthetic phantoms.
#[derive(Parser)]
#[command(name = "unirecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset for one anatomy.
    GenData(GenData),
    /// S1: train a plain network on one anatomy.
    TrainIndependent(TrainIndependent),
    /// S2: universal pre-training over several anatomies (or the shared baseline with --shared).
    PretrainUniversal(PretrainUniversal),
    /// S3: distill single-anatomy teachers into a universal model.
    Distill(Distill),
    /// S4: add a new anatomy to a universal model, training only its affine set.
    Adapt(Adapt),
    /// Score a checkpoint or the zero-filled baseline.
    Evaluate(Evaluate),
    /// Print a parameter count.
    CountParams(CountParams),
    /// Aggregate evaluation runs into a comparison table.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// Profile TOML file, or one of the presets brainish, kneeish, cardiacish.
    #[arg(long)]
    anatomy_profile: String,
    /// Image side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of images (defaults to the profile's dataset_size).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DcArg {
    Hard,
    Soft,
}

/// Training flags. Anything given here overrides the config file.
#[derive(Args)]
struct TrainFlags {
    /// Partial TrainConfig in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Acceleration factor(s); repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    accel: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=5))]
    distill_layer: Option<u64>,
    #[arg(long, value_enum)]
    dc: Option<DcArg>,
    /// Weight of the measurement in soft data consistency.
    #[arg(long)]
    dc_lambda: Option<f64>,
    /// Seed of the validation masks.
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl TrainFlags {
    fn resolve(&self, stage: Stage) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_file(p, stage)?,
            None => TrainConfig::for_stage(stage),
        };
        c.stage = stage;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if !self.accel.is_empty() {
            c.accel = self.accel.clone();
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.omega {
            c.omega = v;
        }
        if let Some(v) = self.distill_layer {
            c.distill_layer = v as usize;
        }
        if let Some(v) = self.eval_seed {
            c.eval_seed = v;
        }
        match (self.dc, self.dc_lambda) {
            (Some(DcArg::Hard), Some(_)) => bail!("--dc-lambda only applies to --dc soft"),
            (Some(DcArg::Hard), None) => c.dc_mode = DcMode::Hard,
            (Some(DcArg::Soft), lambda) => {
                let lambda = match (lambda, c.dc_mode) {
                    (Some(l), _) => l,
                    (None, DcMode::Soft { lambda }) => lambda,
                    (None, DcMode::Hard) => bail!("--dc soft needs --dc-lambda"),
                };
                c.dc_mode = DcMode::Soft { lambda };
            }
            (None, Some(lambda)) => match c.dc_mode {
                DcMode::Soft { .. } => c.dc_mode = DcMode::Soft { lambda },
                DcMode::Hard => bail!("--dc-lambda needs --dc soft"),
            },
            (None, None) => {}
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainIndependent {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct PretrainUniversal {
    /// Dataset directories, one per anatomy; their order fixes the anatomy registry.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Train the plain mixed-anatomy baseline instead (no per-anatomy normalization).
    #[arg(long)]
    shared: bool,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct Distill {
    /// Universal (S2) checkpoint to continue from.
    #[arg(long)]
    base: PathBuf,
    /// Single-anatomy (S1) checkpoints, one per anatomy.
    #[arg(long, required = true)]
    teacher: Vec<PathBuf>,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct Adapt {
    /// Universal (S2/S3) checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Dataset of the new anatomy.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct Evaluate {
    /// Checkpoint directory.
    #[arg(long, conflicts_with = "zero_filled", required_unless_present = "zero_filled")]
    model: Option<PathBuf>,
    /// Score the zero-filled reconstruction instead of a model.
    #[arg(long)]
    zero_filled: bool,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    accel: Vec<f64>,
    /// Mask seed.
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Row label in reports (defaults to the checkpoint's model family).
    #[arg(long)]
    label: Option<String>,
    /// TrainConfig whose mask and data-range settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountParams {
    #[arg(long, default_value = "d5c5")]
    arch: String,
    /// Anatomies in the normalization bank.
    #[arg(long, default_value_t = 0)]
    anatomies: usize,
    /// Count a saved checkpoint instead.
    #[arg(long, conflicts_with_all = ["arch", "anatomies"])]
    checkpoint: Option<PathBuf>,
    /// Print base, per-anatomy and total counts.
    #[arg(long)]
    breakdown: bool,
}

#[derive(Args)]
struct Report {
    /// Run directories (or run.toml files) written by evaluate.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write report.txt, report.csv and run.toml here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn profile_from(arg: &str) -> Result<AnatomyProfile> {
    Ok(match arg {
        "brainish" => AnatomyProfile::brain_like(),
        "kneeish" => AnatomyProfile::knee_like(),
        "cardiacish" => AnatomyProfile::cardiac_like(),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading profile {path}"))?;
            toml::from_str(&text).with_context(|| format!("parsing profile {path}"))?
        }
    })
}

fn load_data(dir: &Path) -> Result<AnatomyData> {
    let (_, data) = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(data)
}

fn load_ckpt(dir: &Path) -> Result<Checkpoint> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn describe(command: &str, inputs: &[(&str, &Path)]) -> String {
    let mut s = format!("unirecon {command}");
    for (flag, p) in inputs {
        s.push_str(&format!(" --{flag} {}", p.display()));
    }
    s
}

fn finish(out: StageOutput, dir: &Path, command: String) -> Result<()> {
    let manifest = out.write(dir, &command)?;
    let best = manifest.best_epoch.unwrap_or(0);
    let rows: Vec<_> = manifest.metrics.iter().filter(|r| r.epoch == best).collect();
    for r in rows {
        println!(
            "{} best epoch {best}: {} {}x val PSNR {:.2} dB, SSIM {:.2}%",
            out.meta.stage, r.anatomy, r.accel, r.psnr_db, r.ssim_pct
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut profile = profile_from(&a.anatomy_profile)?;
    if let Some(n) = a.count {
        profile.dataset_size = n;
    }
    let images = generate_dataset(&profile, a.size, a.seed)?;
    save_dataset(&a.out, &profile, a.size, a.seed, &images)?;
    let mut config = toml::Table::new();
    config.insert("profile".into(), toml::Value::try_from(&profile)?);
    config.insert("size".into(), toml::Value::Integer(a.size as i64));
    config.insert("seed".into(), toml::Value::Integer(a.seed as i64));
    RunManifest::new("unirecon gen-data", a.seed, config).save(&a.out.join(RUN_MANIFEST))?;
    println!("{} images of `{}` written to {}", images.len(), profile.name, a.out.display());
    Ok(())
}

fn run_train_independent(a: TrainIndependent) -> Result<()> {
    let config = a.train.resolve(Stage::S1)?;
    let data = load_data(&a.data)?;
    let out = train_independent(&data, &config)?;
    finish(out, &a.train.out, describe("train-independent", &[("data", &a.data)]))
}

fn run_pretrain(a: PretrainUniversal) -> Result<()> {
    let config = a.train.resolve(Stage::S2)?;
    let data = a.data.iter().map(|d| load_data(d)).collect::<Result<Vec<_>>>()?;
    let out = if a.shared {
        train_shared(&data, &config)?
    } else {
        pretrain_universal(&data, &config, None)?
    };
    let inputs: Vec<(&str, &Path)> = a.data.iter().map(|d| ("data", d.as_path())).collect();
    let cmd = if a.shared { "pretrain-universal --shared" } else { "pretrain-universal" };
    finish(out, &a.train.out, describe(cmd, &inputs))
}

fn run_distill(a: Distill) -> Result<()> {
    let config = a.train.resolve(Stage::S3)?;
    let base = load_ckpt(&a.base)?;
    ensure!(
        matches!(base.meta.stage, Stage::S2 | Stage::S3) && base.model.bank().is_some(),
        "{} is not a universal S2/S3 checkpoint",
        a.base.display()
    );
    let mut teachers = Vec::new();
    for dir in &a.teacher {
        let t = load_ckpt(dir)?;
        ensure!(
            t.meta.variant == Variant::Independent,
            "teacher {} is not a single-anatomy (S1) checkpoint",
            dir.display()
        );
        let [anatomy] = t.meta.trained_on.as_slice() else {
            bail!("teacher {} does not name the anatomy it was trained on", dir.display());
        };
        teachers.push(Teacher {
            anatomy: anatomy.clone(),
            model: t.model,
        });
    }
    let data = a.data.iter().map(|d| load_data(d)).collect::<Result<Vec<_>>>()?;
    let out = distill_universal(base.model, &teachers, &data, &config)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("base", a.base.as_path())];
    inputs.extend(a.teacher.iter().map(|d| ("teacher", d.as_path())));
    inputs.extend(a.data.iter().map(|d| ("data", d.as_path())));
    finish(out, &a.train.out, describe("distill", &inputs))
}

fn run_adapt(a: Adapt) -> Result<()> {
    let config = a.train.resolve(Stage::S4)?;
    let base = load_ckpt(&a.base)?;
    let data = load_data(&a.data)?;
    let out = adapt_new_anatomy(base.model, &base.meta, &data, &config)?;
    finish(
        out,
        &a.train.out,
        describe("adapt", &[("base", a.base.as_path()), ("data", a.data.as_path())]),
    )
}

fn run_evaluate(a: Evaluate) -> Result<()> {
    let mut config = match &a.config {
        // only the evaluation keys matter here
        Some(p) => TrainConfig::from_file(p, Stage::S1)?,
        None => TrainConfig::default(),
    };
    config.eval_seed = a.seed;
    config.accel = a.accel.clone();
    config.validate()?;
    let ckpt = a.model.as_deref().map(load_ckpt).transpose()?;
    let recon = match &ckpt {
        Some(c) => Reconstructor::Model(&c.model),
        None => Reconstructor::ZeroFilled,
    };
    let label = match (&a.label, &ckpt) {
        (Some(l), _) => l.clone(),
        (None, Some(c)) => c.meta.variant.label().to_string(),
        (None, None) => "Undersampled".to_string(),
    };
    let mut records: Vec<EvalRecord> = Vec::new();
    for dir in &a.data {
        let data = load_data(dir)?;
        for &accel in &config.accel {
            let mut r = evaluate(recon, &data, a.split, &EvalSpec::from_config(&config, accel))?;
            r.label = label.clone();
            r.distill_layer = ckpt.as_ref().and_then(|c| c.meta.distill_layer);
            println!(
                "{label} {} {}x {}: PSNR {:.2} dB, SSIM {:.2}%, MAE {:.5}",
                r.anatomy,
                accel,
                r.split,
                r.psnr_db,
                r.ssim_pct,
                r.mae
            );
            records.push(r);
        }
    }
    let mut inputs: Vec<(&str, &Path)> = a.model.iter().map(|m| ("model", m.as_path())).collect();
    inputs.extend(a.data.iter().map(|d| ("data", d.as_path())));
    let cmd = format!("evaluate --split {}", a.split.as_str());
    let mut manifest = RunManifest::new(describe(&cmd, &inputs), a.seed, config.to_table()?);
    manifest.evaluations = records;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    manifest.save(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

fn run_count(a: CountParams) -> Result<()> {
    let (base, per, total) = match &a.checkpoint {
        Some(dir) => {
            let m = load_ckpt(dir)?.model;
            (
                m.count_parameters(ParamScope::Base),
                m.count_parameters(ParamScope::PerAnatomy),
                m.count_parameters(ParamScope::Total),
            )
        }
        None => {
            let arch = Architecture::by_name(&a.arch)?;
            let base = arch.base_parameter_count();
            let per = arch.per_anatomy_parameter_count();
            (base, per, base + a.anatomies * per)
        }
    };
    if a.breakdown {
        println!("base {base}");
        println!("per-anatomy {per}");
        println!("total {total}");
        println!("per-anatomy ratio {:.3}%", 100.0 * per as f64 / base as f64);
    } else {
        println!("{total}");
    }
    Ok(())
}

fn run_report(a: Report) -> Result<()> {
    let mut records = Vec::new();
    for p in &a.runs {
        let path = if p.is_dir() { p.join(RUN_MANIFEST) } else { p.clone() };
        let m = RunManifest::load(&path)?;
        ensure!(!m.evaluations.is_empty(), "{} holds no evaluations", path.display());
        records.extend(m.evaluations);
    }
    let rows = build_report(&records)?;
    let text = render_text(&rows);
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("report.txt"), &text)?;
        std::fs::write(out.join("report.csv"), render_csv(&rows)?)?;
        let inputs: Vec<(&str, &Path)> = a.runs.iter().map(|r| ("run", r.as_path())).collect();
        let mut manifest = RunManifest::new(describe("report", &inputs), 0, toml::Table::new());
        manifest.evaluations = records;
        manifest.save(&out.join(RUN_MANIFEST))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainIndependent(a) => run_train_independent(a),
        Command::PretrainUniversal(a) => run_pretrain(a),
        Command::Distill(a) => run_distill(a),
        Command::Adapt(a) => run_adapt(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::CountParams(a) => run_count(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
