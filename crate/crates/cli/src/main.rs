//! Command-line entry point: dataset generation, training, distillation,
//! evaluation, CKA analysis, ablation grids and plot emission.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use phasekd_core::distill::{
    ablate_fft_layers, ablate_strategies, ablate_teachers, ablation_csv, default_stage,
    distill_stage, evaluate_detector, pooled_features, progressive_pipeline, train_scratch,
    FileConfig, PipelineConfig, StageConfig, Trainer,
};
use phasekd_core::losses::{DistillKind, DistillLossConfig};
use phasekd_core::models::{Detector, Scale};
use phasekd_core::similarity::linear_cka;
use phasekd_core::synthdata::{
    default_test_domains, default_train_domains, generate_dataset, load_dataset, Dataset,
};
use phasekd_core::Error as CoreError;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "phasekd", version, about = "Progressive frequency-domain feature distillation on a synthetic detection task", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain detection dataset.
    GenData(GenDataArgs),
    /// Train a detector from scratch.
    Train(TrainArgs),
    /// Distill a learner below a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Run the full progressive pipeline (scratch senior -> junior -> student).
    Pipeline(PipelineArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Pairwise CKA between checkpoints at every pyramid level.
    Cka(CkaArgs),
    /// Run an ablation grid and emit its CSV table.
    Ablate(AblateArgs),
    /// Render mAP curves from metrics CSVs into an SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CommonTrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    /// Distance for the distillation term: mse | ssim | spectral.
    #[arg(long)]
    loss: Option<String>,
    /// Toggled pyramid levels, e.g. p3,p4,p5.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long = "lambda-kd")]
    lambda_kd: Option<f32>,
    #[arg(long = "lambda-amp")]
    lambda_amp: Option<f32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// tiny | junior | senior.
    #[arg(long)]
    scale: Option<String>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Teacher checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Learner scale: tiny | junior.
    #[arg(long)]
    scale: Option<String>,
    #[command(flatten)]
    loss: LossArgs,
    /// Drop the ground-truth detection loss from the stage objective.
    #[arg(long)]
    no_task_loss: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    #[command(flatten)]
    loss: LossArgs,
    /// Batch size for the junior-teacher stage.
    #[arg(long = "stage1-batch")]
    stage1_batch: Option<usize>,
    #[arg(long)]
    no_task_loss: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CkaArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoints to compare; repeat for each model.
    #[arg(long = "ckpt", required = true, num_args = 1..)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// teachers | strategies | fft-layers.
    #[arg(long)]
    grid: String,
    /// Number of seeds (0..n) per grid cell.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV files, one polyline each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            eprint!("{e}");
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e
                .downcast_ref::<CoreError>()
                .map_or(false, |c| matches!(c, CoreError::Config(_)))
            {
                2
            } else {
                1
            };
            std::process::exit(code);
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<FileConfig> {
    match path {
        Some(p) => Ok(FileConfig::load(p)?),
        None => Ok(FileConfig::default()),
    }
}

fn data_dir(flag: &Option<PathBuf>, cfg: &FileConfig) -> anyhow::Result<PathBuf> {
    flag.clone().or_else(|| cfg.data.dir.clone()).ok_or_else(|| {
        CoreError::Config("no dataset directory: pass --data or set [data] dir".into()).into()
    })
}

fn open_dataset(flag: &Option<PathBuf>, cfg: &FileConfig) -> anyhow::Result<Dataset> {
    let dir = data_dir(flag, cfg)?;
    Ok(load_dataset(&dir).with_context(|| format!("loading dataset from {}", dir.display()))?)
}

fn loss_config(args: &LossArgs, cfg: &FileConfig) -> anyhow::Result<DistillLossConfig> {
    let mut loss = DistillLossConfig::default();
    if let Some(kind) = &cfg.loss.kind {
        loss.kind = *kind;
    }
    if let Some(layers) = cfg.loss.layers {
        loss.layers = layers;
    }
    if let Some(v) = cfg.loss.lambda_kd {
        loss.lambda_kd = v;
    }
    if let Some(v) = cfg.loss.lambda_amp {
        loss.lambda_amp = v;
    }
    if let Some(kind) = &args.loss {
        loss.kind = DistillKind::parse(kind)?;
    }
    if let Some(layers) = &args.layers {
        loss.layers = phasekd_core::distill::parse_layers(layers)?;
    }
    if let Some(v) = args.lambda_kd {
        loss.lambda_kd = v;
    }
    if let Some(v) = args.lambda_amp {
        loss.lambda_amp = v;
    }
    loss.validate()?;
    Ok(loss)
}

/// flag > config-file > default resolution for stage-shaped settings.
fn stage_config(
    common: &CommonTrainArgs,
    cfg: &FileConfig,
    stage_idx: usize,
    scale: Scale,
) -> StageConfig {
    let file_stage = cfg.stages.get(&stage_idx).cloned().unwrap_or_default();
    let mut sc = default_stage(scale, 0);
    if let Some(v) = file_stage.epochs {
        sc.epochs = v;
    }
    if let Some(v) = file_stage.batch {
        sc.batch_size = v;
    }
    if let Some(v) = file_stage.lr0 {
        sc.lr0 = v;
    }
    if let Some(v) = file_stage.seed {
        sc.seed = v;
    }
    if let Some(v) = file_stage.include_task_loss {
        sc.include_task_loss = v;
    }
    if let Some(v) = common.epochs {
        sc.epochs = v;
    }
    if let Some(v) = common.batch {
        sc.batch_size = v;
    }
    if let Some(v) = common.lr0 {
        sc.lr0 = v;
    }
    if let Some(v) = common.seed.or(cfg.data.seed) {
        sc.seed = v;
    }
    sc
}

fn ensure_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = load_config(&a.config)?;
            let train = a.train.or(cfg.data.train).unwrap_or(512);
            let test = a.test.or(cfg.data.test).unwrap_or(128);
            let seed = a.seed.or(cfg.data.seed).unwrap_or(0);
            ensure_out(&a.out)?;
            let manifest = generate_dataset(
                train,
                test,
                &default_train_domains(),
                &default_test_domains(),
                &a.out,
                seed,
            )?;
            eprintln!(
                "wrote {} train / {} test samples to {}",
                manifest.count("train"),
                manifest.count("test"),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = load_config(&a.common.config)?;
            let data = open_dataset(&a.common.data, &cfg)?;
            let scale = match &a.scale {
                Some(s) => Scale::parse(s)?,
                None => cfg.stages.get(&0).and_then(|s| s.scale).unwrap_or(Scale::Tiny),
            };
            let sc = stage_config(&a.common, &cfg, 0, scale);
            ensure_out(&a.common.out)?;
            eprintln!(
                "training {} from scratch: {} epochs, batch {}, lr0 {}",
                scale.name(),
                sc.epochs,
                sc.batch_size,
                sc.lr0
            );
            let result = train_scratch(scale, &data, &sc)?;
            let ckpt = a.common.out.join(format!("{}.ckpt", scale.name()));
            result.learner.save(&ckpt, scale.name())?;
            result.log.save(&a.common.out.join("metrics.csv"))?;
            let fin = result.log.final_eval().expect("non-empty log");
            eprintln!(
                "done: ap50 {:.4} ap75 {:.4} map {:.4} -> {}",
                fin.ap50,
                fin.ap75,
                fin.map,
                ckpt.display()
            );
        }
        Command::Distill(a) => {
            let cfg = load_config(&a.common.config)?;
            let data = open_dataset(&a.common.data, &cfg)?;
            let scale = match &a.scale {
                Some(s) => Scale::parse(s)?,
                None => Scale::Tiny,
            };
            let mut sc = stage_config(&a.common, &cfg, 0, scale);
            sc.loss = loss_config(&a.loss, &cfg)?;
            sc.teacher_ckpt = a
                .ckpt
                .clone()
                .or_else(|| cfg.stages.get(&0).and_then(|s| s.teacher_ckpt.clone()));
            if a.no_task_loss {
                sc.include_task_loss = false;
            }
            if sc.teacher_ckpt.is_none() {
                bail!(CoreError::Config("distill needs --ckpt (teacher checkpoint)".into()));
            }
            ensure_out(&a.common.out)?;
            eprintln!(
                "distilling {} below {}: loss {}, layers {:?}",
                scale.name(),
                sc.teacher_ckpt.as_ref().unwrap().display(),
                sc.loss.kind.name(),
                sc.loss.layers
            );
            let result = distill_stage(&sc, &data)?;
            let ckpt = a.common.out.join("student.ckpt");
            result.learner.save(&ckpt, "student")?;
            result.log.save(&a.common.out.join("metrics.csv"))?;
            let fin = result.log.final_eval().expect("non-empty log");
            eprintln!(
                "done: ap50 {:.4} ap75 {:.4} map {:.4} -> {}",
                fin.ap50,
                fin.ap75,
                fin.map,
                ckpt.display()
            );
        }
        Command::Pipeline(a) => {
            let cfg = load_config(&a.common.config)?;
            let data = open_dataset(&a.common.data, &cfg)?;
            let mut pc = PipelineConfig::new(a.common.seed.or(cfg.data.seed).unwrap_or(0));
            if let Some(stage0) = cfg.stages.get(&0) {
                if let Some(v) = stage0.epochs {
                    pc.epochs = v;
                }
                if let Some(v) = stage0.batch {
                    pc.batch_size = v;
                }
                if let Some(v) = stage0.lr0 {
                    pc.lr0 = v;
                }
            }
            if let Some(stage1) = cfg.stages.get(&1) {
                if let Some(v) = stage1.batch {
                    pc.stage1_batch_size = v;
                }
            }
            if let Some(v) = a.common.epochs {
                pc.epochs = v;
            }
            if let Some(v) = a.common.batch {
                pc.batch_size = v;
            }
            if let Some(v) = a.stage1_batch {
                pc.stage1_batch_size = v;
            }
            if let Some(v) = a.common.lr0 {
                pc.lr0 = v;
            }
            pc.loss = loss_config(&a.loss, &cfg)?;
            pc.include_task_loss = !a.no_task_loss;
            ensure_out(&a.common.out)?;
            eprintln!(
                "pipeline: {} epochs/stage, loss {}, seed {}",
                pc.epochs,
                pc.loss.kind.name(),
                pc.seed
            );
            let result = progressive_pipeline(&data, &a.common.out, &pc)?;
            for s in &result.manifest.stages {
                eprintln!(
                    "stage {} {} {}: ap50 {:.4} ap75 {:.4} map {:.4} ({:.0}s)",
                    s.index,
                    s.kind,
                    s.scale.name(),
                    s.ap50,
                    s.ap75,
                    s.map,
                    s.wall_s
                );
            }
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.config)?;
            let data = open_dataset(&a.data, &cfg)?;
            let (role, det) = Detector::load(&a.ckpt)?;
            let result = evaluate_detector(&det, &data.test, data.num_classes)?;
            eprintln!(
                "{} ({}): ap50 {:.4} ap75 {:.4} map {:.4}",
                a.ckpt.display(),
                role,
                result.ap50,
                result.ap75,
                result.map
            );
            if let Some(out) = &a.out {
                ensure_out(out)?;
                let csv = format!(
                    "ap50,ap75,map\n{},{},{}\n",
                    phasekd_core::util::fmt_f64(result.ap50),
                    phasekd_core::util::fmt_f64(result.ap75),
                    phasekd_core::util::fmt_f64(result.map)
                );
                std::fs::write(out.join("eval.csv"), csv)
                    .with_context(|| format!("writing {}", out.join("eval.csv").display()))?;
            }
        }
        Command::Cka(a) => {
            let cfg = load_config(&a.config)?;
            let data = open_dataset(&a.data, &cfg)?;
            ensure_out(&a.out)?;
            let mut models = Vec::new();
            for path in &a.ckpts {
                let (_, det) = Detector::load(path)?;
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                let feats = pooled_features(&det, &data.test)?;
                models.push((label, feats));
            }
            let mut csv = String::from("model_a,model_b,layer,cka\n");
            for i in 0..models.len() {
                for j in (i + 1)..models.len() {
                    let (la, fa) = &models[i];
                    let (lb, fb) = &models[j];
                    for (layer, xa, xb) in [
                        ("p3", &fa.per_level[0], &fb.per_level[0]),
                        ("p4", &fa.per_level[1], &fb.per_level[1]),
                        ("p5", &fa.per_level[2], &fb.per_level[2]),
                        ("concat", &fa.concat, &fb.concat),
                    ] {
                        let v = linear_cka(xa, xb)?;
                        csv.push_str(&format!(
                            "{la},{lb},{layer},{}\n",
                            phasekd_core::util::fmt_f64(v)
                        ));
                    }
                }
            }
            std::fs::write(a.out.join("cka.csv"), csv)
                .with_context(|| format!("writing {}", a.out.join("cka.csv").display()))?;
            eprintln!("wrote {}", a.out.join("cka.csv").display());
        }
        Command::Ablate(a) => {
            let cfg = load_config(&a.config)?;
            let data = open_dataset(&a.data, &cfg)?;
            ensure_out(&a.out)?;
            let mut trainer = Trainer::new(&data, a.out.join("work"));
            if let Some(v) = a.epochs.or(cfg.stages.get(&0).and_then(|s| s.epochs)) {
                trainer.epochs = v;
            }
            if let Some(v) = a.lr0.or(cfg.stages.get(&0).and_then(|s| s.lr0)) {
                trainer.lr0 = v;
            }
            let seeds: Vec<u64> = (0..a.seeds.unwrap_or(1)).collect();
            let (rows, name) = match a.grid.as_str() {
                "teachers" => (ablate_teachers(&trainer, &seeds)?, "ablation_teachers.csv"),
                "strategies" => (ablate_strategies(&trainer, &seeds)?, "ablation_strategies.csv"),
                "fft-layers" => (ablate_fft_layers(&trainer, &seeds)?, "ablation_fft_layers.csv"),
                other => bail!(CoreError::Config(format!(
                    "unknown grid {other:?}, expected teachers|strategies|fft-layers"
                ))),
            };
            std::fs::write(a.out.join(name), ablation_csv(&rows))
                .with_context(|| format!("writing {}", a.out.join(name).display()))?;
            for r in &rows {
                eprintln!(
                    "{:16} seed {}: ap50 {:.4} ap75 {:.4} map {:.4}",
                    r.label, r.seed, r.ap50, r.ap75, r.map
                );
            }
            eprintln!("wrote {}", a.out.join(name).display());
        }
        Command::Plot(a) => {
            let mut curves = Vec::new();
            for input in &a.inputs {
                curves.push(phasekd_core::plot::read_curve(input)?);
            }
            let svg = phasekd_core::plot::render_svg(&curves)?;
            if let Some(parent) = a.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .with_context(|| format!("creating {}", parent.display()))?;
                }
            }
            std::fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
            eprintln!("wrote {}", a.out.display());
        }
    }
    Ok(())
}
