//! Orchestration: scratch training, single distillation stages, the
//! two-stage progressive pipeline, ablation grids, and run manifests.

mod config;
mod eval;

pub use config::{parse_layers, FileConfig};
pub use eval::{
    average_precision, coco_thresholds, collect_detections, evaluate_detector, EvalResult,
    EVAL_CONF_THRESHOLD, EVAL_MAX_DETS, EVAL_NMS_IOU,
};

use crate::error::{Error, Result};
use crate::losses::{
    detection_loss, distill_distance, stage_objective, DistillKind, DistillLossConfig,
};
use crate::models::{build_detector, build_projector, Detector, DetectorSpec, Scale, IMAGE_SIZE};
use crate::similarity::FeatureMatrix;
use crate::synthdata::{batch_tensor, shuffled_indices, Dataset, ImageSample};
use crate::tensor::{cosine_lr, Adam, GradTape, Tensor};
use crate::util::child_seed;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One distillation stage description.
#[derive(Debug, Clone)]
pub struct StageConfig {
    /// Frozen teacher checkpoint; `None` trains from scratch.
    pub teacher_ckpt: Option<PathBuf>,
    pub learner_scale: Scale,
    pub loss: DistillLossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Whether the ground-truth detection loss joins the stage objective.
    pub include_task_loss: bool,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        self.loss.validate()
    }
}

/// Defaults mirroring the training setup: lr 0.001 cosine-decayed, batch 32
/// (16 in the junior-teacher stage), task loss on.
pub fn default_stage(learner_scale: Scale, seed: u64) -> StageConfig {
    StageConfig {
        teacher_ckpt: None,
        learner_scale,
        loss: DistillLossConfig::default(),
        epochs: 30,
        batch_size: 32,
        lr0: 1e-3,
        seed,
        include_task_loss: true,
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_task: f64,
    /// Mean distillation term per toggled layer (0 when off).
    pub kd: [f64; 3],
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

/// Training history; one record per epoch, epochs contiguous from 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_task,kd_p3,kd_p4,kd_p5,ap50,ap75,map";

impl MetricsLog {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.epoch != i {
                return Err(Error::Contract(format!(
                    "metrics epochs must be contiguous from 0; record {i} says {}",
                    r.epoch
                )));
            }
            let vals = [r.lr, r.loss_task, r.kd[0], r.kd[1], r.kd[2], r.ap50, r.ap75, r.map];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("non-finite metric at epoch {i}")));
            }
        }
        Ok(())
    }

    pub fn final_eval(&self) -> Option<EvalResult> {
        self.records.last().map(|r| EvalResult { ap50: r.ap50, ap75: r.ap75, map: r.map })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                crate::util::fmt_f64(r.lr),
                crate::util::fmt_f64(r.loss_task),
                crate::util::fmt_f64(r.kd[0]),
                crate::util::fmt_f64(r.kd[1]),
                crate::util::fmt_f64(r.kd[2]),
                crate::util::fmt_f64(r.ap50),
                crate::util::fmt_f64(r.ap75),
                crate::util::fmt_f64(r.map)
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MetricsLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == METRICS_HEADER => {}
            other => {
                return Err(Error::parse(
                    path,
                    format!("bad metrics header {:?}", other.unwrap_or("")),
                ))
            }
        }
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::parse(path, format!("line {}: expected 9 fields", ln + 2)));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::parse(path, format!("line {}: bad number {s:?}", ln + 2)))
            };
            records.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {}: bad epoch", ln + 2)))?,
                lr: num(f[1])?,
                loss_task: num(f[2])?,
                kd: [num(f[3])?, num(f[4])?, num(f[5])?],
                ap50: num(f[6])?,
                ap75: num(f[7])?,
                map: num(f[8])?,
            });
        }
        let log = MetricsLog { records };
        log.validate()?;
        Ok(log)
    }
}

/// Output of one training stage.
pub struct StageResult {
    pub learner: Detector,
    pub log: MetricsLog,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Trains a detector from scratch with the detection loss only.
pub fn train_scratch(scale: Scale, data: &Dataset, cfg: &StageConfig) -> Result<StageResult> {
    let mut cfg = cfg.clone();
    cfg.learner_scale = scale;
    cfg.teacher_ckpt = None;
    cfg.loss.lambda_kd = 0.0;
    run_stage(&cfg, data, None)
}

/// Runs one distillation stage: loads and freezes the teacher, trains a
/// fresh learner (plus a fresh projector) against the stage objective.
pub fn distill_stage(cfg: &StageConfig, data: &Dataset) -> Result<StageResult> {
    let path = cfg
        .teacher_ckpt
        .as_ref()
        .ok_or_else(|| Error::Config("distill stage needs a teacher checkpoint".into()))?;
    let (_, mut teacher) = Detector::load(path)?;
    if teacher.spec.scale <= cfg.learner_scale {
        return Err(Error::Config(format!(
            "teacher scale {} must be strictly larger than learner scale {}",
            teacher.spec.scale.name(),
            cfg.learner_scale.name()
        )));
    }
    teacher.freeze();
    run_stage(cfg, data, Some(teacher))
}

/// Shared train loop. With a teacher present the stage objective combines
/// the task loss (optional) with per-layer distillation distances; without
/// one it reduces to plain task training.
fn run_stage(cfg: &StageConfig, data: &Dataset, teacher: Option<Detector>) -> Result<StageResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Contract("training needs non-empty train and test splits".into()));
    }
    let spec =
        DetectorSpec { scale: cfg.learner_scale, num_classes: data.num_classes, seed: cfg.seed };
    let mut learner = build_detector(&spec)?;
    let mut projector =
        teacher.as_ref().map(|t| build_projector(cfg.learner_scale, t.spec.scale));
    let teacher_crc = teacher.as_ref().map(|t| t.content_crc());

    let mut opt_learner = Adam::new(learner.params());
    let mut opt_projector = projector.as_ref().map(|p| Adam::new(p.params()));

    let use_kd = teacher.is_some() && cfg.loss.lambda_kd > 0.0;
    let mut log = MetricsLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let order = shuffled_indices(data.train.len(), child_seed(cfg.seed, "shuffle", epoch as u64));
        let mut task_losses = Vec::new();
        let mut kd_sums = [Vec::new(), Vec::new(), Vec::new()];
        for batch_idx in order.chunks(cfg.batch_size) {
            let samples: Vec<&ImageSample> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let (images, targets) = batch_tensor(&samples);

            // Forward, loss and backward live in an inner scope so every
            // shared reference to parameter storage is gone before the
            // optimizer mutates values in place.
            {
                let mut tape = GradTape::new();
                let lb = learner.bind(&mut tape);
                let out = learner.forward(&mut tape, &lb, &images)?;

                let task = if cfg.include_task_loss || teacher.is_none() {
                    detection_loss(&mut tape, &out.predictions, &targets, IMAGE_SIZE)?
                } else {
                    Tensor::scalar(0.0)
                };

                let mut kd_terms: [Option<Tensor>; 3] = [None, None, None];
                let mut pb = Vec::new();
                if use_kd {
                    let t = teacher.as_ref().expect("kd implies teacher");
                    let proj = projector.as_ref().expect("teacher implies projector");
                    let tb = t.bind(&mut tape);
                    let t_out = t.forward(&mut tape, &tb, &images)?;
                    pb = proj.bind(&mut tape);
                    let projected = proj.project(&mut tape, &pb, &out.features)?;
                    for li in 0..3 {
                        if cfg.loss.layers[li] {
                            let term = distill_distance(
                                &mut tape,
                                &t_out.features[li],
                                &projected[li],
                                &cfg.loss,
                            )?;
                            kd_sums[li].push(term.item_f64());
                            kd_terms[li] = Some(term);
                        }
                    }
                }
                task_losses.push(task.item_f64());

                let loss = if use_kd {
                    stage_objective(&mut tape, &task, &kd_terms, &cfg.loss)?
                } else {
                    task
                };
                let mut grads = tape.backward(&loss)?;
                learner.absorb_grads(&lb, &mut grads);
                if let Some(p) = projector.as_mut() {
                    if use_kd {
                        p.absorb_grads(&pb, &mut grads);
                    }
                }
            }
            opt_learner.step(learner.params_mut(), lr as f32)?;
            if let (Some(p), Some(opt)) = (projector.as_mut(), opt_projector.as_mut()) {
                if use_kd {
                    opt.step(p.params_mut(), lr as f32)?;
                }
            }
        }

        let eval = evaluate_detector(&learner, &data.test, data.num_classes)?;
        log.records.push(EpochRecord {
            epoch,
            lr,
            loss_task: mean(&task_losses),
            kd: [mean(&kd_sums[0]), mean(&kd_sums[1]), mean(&kd_sums[2])],
            ap50: eval.ap50,
            ap75: eval.ap75,
            map: eval.map,
        });
    }
    if let (Some(t), Some(before)) = (teacher.as_ref(), teacher_crc) {
        if t.content_crc() != before {
            return Err(Error::Contract("frozen teacher parameters changed during stage".into()));
        }
    }
    log.validate()?;
    Ok(StageResult { learner, log })
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// One completed stage in a run manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub index: usize,
    pub kind: String,
    pub scale: Scale,
    pub ckpt: String,
    pub metrics: String,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub wall_s: f64,
}

/// Records what a run produced: stage sequence, dataset fingerprint, code
/// fingerprint, and final metrics per stage.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub code: String,
    pub dataset_crc: u32,
    pub stages: Vec<StageRecord>,
}

pub const RUN_MANIFEST_NAME: &str = "manifest.txt";

/// Content hash of the running binary, as a stand-in for a source hash.
pub fn code_fingerprint() -> String {
    fn hash_exe() -> Option<String> {
        let path = std::env::current_exe().ok()?;
        let bytes = std::fs::read(path).ok()?;
        Some(format!("{:08x}", crate::util::crc32(&bytes)))
    }
    hash_exe().unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn new(dataset_crc: u32) -> Self {
        RunManifest { code: code_fingerprint(), dataset_crc, stages: Vec::new() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut out = String::from("# run manifest\n");
        let _ = writeln!(out, "code {}", self.code);
        let _ = writeln!(out, "dataset_crc {:08x}", self.dataset_crc);
        for s in &self.stages {
            let _ = writeln!(
                out,
                "stage {} {} {} ckpt {} metrics {} ap50 {} ap75 {} map {} wall_s {}",
                s.index,
                s.kind,
                s.scale.name(),
                s.ckpt,
                s.metrics,
                crate::util::fmt_f64(s.ap50),
                crate::util::fmt_f64(s.ap75),
                crate::util::fmt_f64(s.map),
                crate::util::fmt_f64(s.wall_s)
            );
        }
        let path = dir.join(RUN_MANIFEST_NAME);
        std::fs::write(&path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(RUN_MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut code = String::new();
        let mut dataset_crc = 0u32;
        let mut stages = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::parse(&path, format!("line {}: {what}", ln + 1));
            match f[0] {
                "code" => code = f.get(1).ok_or_else(|| bad("missing code"))?.to_string(),
                "dataset_crc" => {
                    dataset_crc = u32::from_str_radix(f.get(1).ok_or_else(|| bad("missing crc"))?, 16)
                        .map_err(|_| bad("bad crc"))?
                }
                "stage" => {
                    if f.len() != 17 {
                        return Err(bad("stage line needs 17 fields"));
                    }
                    let num = |s: &str| -> Result<f64> {
                        s.parse().map_err(|_| bad("bad number"))
                    };
                    stages.push(StageRecord {
                        index: f[1].parse().map_err(|_| bad("bad index"))?,
                        kind: f[2].to_string(),
                        scale: Scale::parse(f[3])?,
                        ckpt: f[5].to_string(),
                        metrics: f[7].to_string(),
                        ap50: num(f[9])?,
                        ap75: num(f[11])?,
                        map: num(f[13])?,
                        wall_s: num(f[15])?,
                    });
                }
                other => return Err(bad(&format!("unknown directive {other:?}"))),
            }
        }
        Ok(RunManifest { code, dataset_crc, stages })
    }

    /// Re-loads every checkpoint and re-evaluates it on the test split,
    /// checking the logged final metrics within `tol`.
    pub fn verify(&self, dir: &Path, data: &Dataset, tol: f64) -> Result<()> {
        for s in &self.stages {
            let (_, det) = Detector::load(&dir.join(&s.ckpt))?;
            let eval = evaluate_detector(&det, &data.test, data.num_classes)?;
            let close = (eval.ap50 - s.ap50).abs() <= tol
                && (eval.ap75 - s.ap75).abs() <= tol
                && (eval.map - s.map).abs() <= tol;
            if !close {
                return Err(Error::Integrity {
                    path: dir.join(&s.ckpt),
                    reason: format!(
                        "re-evaluation ({:.6}/{:.6}/{:.6}) disagrees with manifest ({:.6}/{:.6}/{:.6})",
                        eval.ap50, eval.ap75, eval.map, s.ap50, s.ap75, s.map
                    ),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Progressive pipeline
// ---------------------------------------------------------------------------

/// Stage parameters for the three-step pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr0: f64,
    pub loss: DistillLossConfig,
    pub include_task_loss: bool,
    /// Batch size for scratch training and the student stage.
    pub batch_size: usize,
    /// Batch size for the junior-teacher stage.
    pub stage1_batch_size: usize,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            seed,
            epochs: 30,
            lr0: 1e-3,
            loss: DistillLossConfig::default(),
            include_task_loss: true,
            batch_size: 32,
            stage1_batch_size: 16,
        }
    }
}

/// Result paths of a finished pipeline.
pub struct PipelineResult {
    pub senior_ckpt: PathBuf,
    pub junior_ckpt: PathBuf,
    pub student_ckpt: PathBuf,
    pub manifest: RunManifest,
}

/// Stage 0 trains the senior from scratch, stage 1 distills the junior from
/// the frozen senior, stage 2 distills the student from the frozen junior.
pub fn progressive_pipeline(
    data: &Dataset,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = RunManifest::new(data.manifest_crc);

    let stage = |index: usize,
                     kind: &str,
                     scale: Scale,
                     teacher: Option<PathBuf>,
                     batch: usize,
                     role: &str,
                     manifest: &mut RunManifest|
     -> Result<PathBuf> {
        let started = std::time::Instant::now();
        let sc = StageConfig {
            teacher_ckpt: teacher.clone(),
            learner_scale: scale,
            loss: cfg.loss,
            epochs: cfg.epochs,
            batch_size: batch,
            lr0: cfg.lr0,
            seed: child_seed(cfg.seed, "stage", index as u64),
            include_task_loss: cfg.include_task_loss,
        };
        let result = if teacher.is_some() {
            distill_stage(&sc, data)
        } else {
            train_scratch(scale, data, &sc)
        }
        .map_err(|e| Error::Contract(format!("stage {index} ({kind}) failed: {e}")))?;
        let ckpt_name = format!("{role}.ckpt");
        let metrics_name = format!("{role}_metrics.csv");
        result.learner.save(&out_dir.join(&ckpt_name), role)?;
        result.log.save(&out_dir.join(&metrics_name))?;
        let fin = result.log.final_eval().expect("epochs >= 1");
        manifest.stages.push(StageRecord {
            index,
            kind: kind.to_string(),
            scale,
            ckpt: ckpt_name.clone(),
            metrics: metrics_name,
            ap50: fin.ap50,
            ap75: fin.ap75,
            map: fin.map,
            wall_s: started.elapsed().as_secs_f64(),
        });
        Ok(out_dir.join(ckpt_name))
    };

    let senior = stage(0, "scratch", Scale::Senior, None, cfg.batch_size, "senior", &mut manifest)?;
    let junior = stage(
        1,
        "distill",
        Scale::Junior,
        Some(senior.clone()),
        cfg.stage1_batch_size,
        "junior",
        &mut manifest,
    )?;
    let student = stage(
        2,
        "distill",
        Scale::Tiny,
        Some(junior.clone()),
        cfg.batch_size,
        "student",
        &mut manifest,
    )?;
    manifest.save(out_dir)?;
    Ok(PipelineResult { senior_ckpt: senior, junior_ckpt: junior, student_ckpt: student, manifest })
}

// ---------------------------------------------------------------------------
// Feature pooling for CKA
// ---------------------------------------------------------------------------

/// Per-level and concatenated feature matrices: one row per sample, global
/// average pooling over each FPN level's spatial extent.
pub struct PooledFeatures {
    pub per_level: [FeatureMatrix; 3],
    pub concat: FeatureMatrix,
}

pub fn pooled_features(det: &Detector, samples: &[ImageSample]) -> Result<PooledFeatures> {
    if samples.len() < 2 {
        return Err(Error::Contract("feature pooling needs at least two samples".into()));
    }
    let mut rows: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for chunk in samples.chunks(32) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (images, _) = batch_tensor(&refs);
        let out = det.infer(&images)?;
        for li in 0..3 {
            let f = &out.features[li];
            let (n, c, h, w) = crate::tensor::rank4_dims(f)?;
            let hw = (h * w) as f64;
            for ni in 0..n {
                for ci in 0..c {
                    let at = (ni * c + ci) * h * w;
                    let sum: f64 =
                        f.data()[at..at + h * w].iter().map(|&v| v as f64).sum();
                    rows[li].push(sum / hw);
                }
            }
        }
    }
    let n = samples.len();
    let dims: Vec<usize> = (0..3).map(|li| rows[li].len() / n).collect();
    let per_level: Vec<FeatureMatrix> = (0..3)
        .map(|li| FeatureMatrix::new(n, dims[li], rows[li].clone()))
        .collect::<Result<_>>()?;
    let mut concat_rows = Vec::with_capacity(n * (dims[0] + dims[1] + dims[2]));
    for i in 0..n {
        for li in 0..3 {
            concat_rows
                .extend_from_slice(&rows[li][i * dims[li]..(i + 1) * dims[li]]);
        }
    }
    let concat = FeatureMatrix::new(n, dims[0] + dims[1] + dims[2], concat_rows)?;
    let mut it = per_level.into_iter();
    Ok(PooledFeatures {
        per_level: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
        concat,
    })
}

// ---------------------------------------------------------------------------
// Experiment cache and ablation grids
// ---------------------------------------------------------------------------

/// Trains-on-demand artifact store. Checkpoints and logs are keyed by their
/// full configuration, so identical requests reuse the file on disk;
/// determinism makes the cached artifact bit-identical to a fresh run.
pub struct Trainer<'d> {
    pub data: &'d Dataset,
    pub work_dir: PathBuf,
    pub epochs: usize,
    pub lr0: f64,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, work_dir: impl Into<PathBuf>) -> Self {
        Trainer { data, work_dir: work_dir.into(), epochs: 30, lr0: 1e-3 }
    }

    fn loss_key(loss: &DistillLossConfig) -> String {
        let layers: String = ["3", "4", "5"]
            .iter()
            .zip(loss.layers)
            .filter(|(_, on)| *on)
            .map(|(s, _)| *s)
            .collect();
        format!("{}-p{layers}-kd{}-amp{}", loss.kind.name(), loss.lambda_kd, loss.lambda_amp)
    }

    /// Scratch-trains (or reuses) a detector; returns checkpoint path + log.
    pub fn scratch(&self, scale: Scale, seed: u64) -> Result<(PathBuf, MetricsLog)> {
        let stem = format!("scratch_{}_s{}_e{}", scale.name(), seed, self.epochs);
        let ckpt = self.work_dir.join(format!("{stem}.ckpt"));
        let metrics = self.work_dir.join(format!("{stem}.csv"));
        if ckpt.exists() && metrics.exists() {
            return Ok((ckpt, MetricsLog::load(&metrics)?));
        }
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let cfg = StageConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            ..default_stage(scale, seed)
        };
        let result = train_scratch(scale, self.data, &cfg)?;
        result.learner.save(&ckpt, scale.name())?;
        result.log.save(&metrics)?;
        Ok((ckpt, result.log))
    }

    /// Distills (or reuses) a learner below `teacher_ckpt`.
    pub fn distill(
        &self,
        teacher_ckpt: &Path,
        learner_scale: Scale,
        loss: &DistillLossConfig,
        seed: u64,
        batch_size: usize,
        tag: &str,
    ) -> Result<(PathBuf, MetricsLog)> {
        let stem = format!(
            "distill_{tag}_{}_s{}_e{}_b{batch_size}_{}",
            learner_scale.name(),
            seed,
            self.epochs,
            Self::loss_key(loss)
        );
        let ckpt = self.work_dir.join(format!("{stem}.ckpt"));
        let metrics = self.work_dir.join(format!("{stem}.csv"));
        if ckpt.exists() && metrics.exists() {
            return Ok((ckpt, MetricsLog::load(&metrics)?));
        }
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let cfg = StageConfig {
            teacher_ckpt: Some(teacher_ckpt.to_path_buf()),
            learner_scale,
            loss: *loss,
            epochs: self.epochs,
            batch_size,
            lr0: self.lr0,
            seed,
            include_task_loss: true,
        };
        let result = distill_stage(&cfg, self.data)?;
        result.learner.save(&ckpt, "student")?;
        result.log.save(&metrics)?;
        Ok((ckpt, result.log))
    }

    /// Progressive chain under a given loss: senior (scratch, cached) ->
    /// junior -> student. Returns the student artifact.
    pub fn progressive(
        &self,
        loss: &DistillLossConfig,
        seed: u64,
    ) -> Result<(PathBuf, MetricsLog)> {
        let (senior, _) = self.scratch(Scale::Senior, seed)?;
        let mse = Self::loss_key(loss);
        let (junior, _) =
            self.distill(&senior, Scale::Junior, loss, seed, 16, &format!("prog1-{mse}"))?;
        self.distill(&junior, Scale::Tiny, loss, seed, 32, &format!("prog2-{mse}"))
    }
}

/// One ablation table row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,seed,ap50,ap75,map\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.seed,
            crate::util::fmt_f64(r.ap50),
            crate::util::fmt_f64(r.ap75),
            crate::util::fmt_f64(r.map)
        );
    }
    out
}

fn row(label: &str, seed: u64, log: &MetricsLog) -> AblationRow {
    let fin = log.final_eval().expect("stage logs are non-empty");
    AblationRow { label: label.into(), seed, ap50: fin.ap50, ap75: fin.ap75, map: fin.map }
}

fn mse_loss() -> DistillLossConfig {
    DistillLossConfig { kind: DistillKind::FeatureMse, ..Default::default() }
}

fn spectral_loss() -> DistillLossConfig {
    DistillLossConfig { kind: DistillKind::SpectralPhase, ..Default::default() }
}

/// Teacher-chain ablation: no teacher, junior teacher, senior teacher, and
/// the progressive chain, all with the plain feature-MSE loss.
pub fn ablate_teachers(trainer: &Trainer, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let (_, log) = trainer.scratch(Scale::Tiny, seed)?;
        rows.push(row("none", seed, &log));

        let (junior, _) = trainer.scratch(Scale::Junior, seed)?;
        let (_, log) = trainer.distill(&junior, Scale::Tiny, &mse_loss(), seed, 32, "direct-junior")?;
        rows.push(row("junior", seed, &log));

        let (senior, _) = trainer.scratch(Scale::Senior, seed)?;
        let (_, log) = trainer.distill(&senior, Scale::Tiny, &mse_loss(), seed, 32, "direct-senior")?;
        rows.push(row("senior", seed, &log));

        let (_, log) = trainer.progressive(&mse_loss(), seed)?;
        rows.push(row("progressive", seed, &log));
    }
    Ok(rows)
}

/// Strategy grid: {progressive on/off} x {spectral loss on/off}. "Off/off"
/// is the scratch baseline; direct rows use the senior teacher.
pub fn ablate_strategies(trainer: &Trainer, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let (_, log) = trainer.scratch(Scale::Tiny, seed)?;
        rows.push(row("none", seed, &log));

        let (senior, _) = trainer.scratch(Scale::Senior, seed)?;
        let (_, log) =
            trainer.distill(&senior, Scale::Tiny, &spectral_loss(), seed, 32, "direct-senior")?;
        rows.push(row("fft", seed, &log));

        let (_, log) = trainer.progressive(&mse_loss(), seed)?;
        rows.push(row("progressive", seed, &log));

        let (_, log) = trainer.progressive(&spectral_loss(), seed)?;
        rows.push(row("progressive_fft", seed, &log));
    }
    Ok(rows)
}

/// All seven non-empty P3/P4/P5 toggle subsets, spectral loss, direct
/// senior -> tiny distillation.
pub fn ablate_fft_layers(trainer: &Trainer, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let subsets: [(&str, [bool; 3]); 7] = [
        ("p3", [true, false, false]),
        ("p4", [false, true, false]),
        ("p5", [false, false, true]),
        ("p3p4", [true, true, false]),
        ("p4p5", [false, true, true]),
        ("p3p5", [true, false, true]),
        ("p3p4p5", [true, true, true]),
    ];
    let mut rows = Vec::new();
    for &seed in seeds {
        let (senior, _) = trainer.scratch(Scale::Senior, seed)?;
        for (label, layers) in subsets {
            let loss = DistillLossConfig { layers, ..spectral_loss() };
            let (_, log) =
                trainer.distill(&senior, Scale::Tiny, &loss, seed, 32, "direct-senior")?;
            rows.push(row(label, seed, &log));
        }
    }
    Ok(rows)
}
