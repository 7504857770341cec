//! Training objectives: the dense detection task loss, the feature-space
//! distillation distances (MSE, SSIM), the frequency-domain phase distance,
//! and the combined stage objective.

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor};

/// Which distance the distillation term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillKind {
    FeatureMse,
    FeatureSsim,
    SpectralPhase,
}

impl DistillKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(DistillKind::FeatureMse),
            "ssim" => Ok(DistillKind::FeatureSsim),
            "spectral" => Ok(DistillKind::SpectralPhase),
            other => Err(Error::Config(format!("unknown loss kind {other:?}, expected mse|ssim|spectral"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistillKind::FeatureMse => "mse",
            DistillKind::FeatureSsim => "ssim",
            DistillKind::SpectralPhase => "spectral",
        }
    }
}

/// Distillation term configuration: distance kind, which pyramid levels
/// participate, and the mixing weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLossConfig {
    pub kind: DistillKind,
    /// Toggles for P3, P4, P5.
    pub layers: [bool; 3],
    pub lambda_kd: f32,
    pub lambda_amp: f32,
}

impl Default for DistillLossConfig {
    fn default() -> Self {
        DistillLossConfig {
            kind: DistillKind::FeatureMse,
            layers: [true, true, true],
            lambda_kd: 1.0,
            lambda_amp: 0.0,
        }
    }
}

impl DistillLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kd < 0.0 || self.lambda_amp < 0.0 {
            return Err(Error::Config(format!(
                "distillation weights must be non-negative, got lambda_kd={} lambda_amp={}",
                self.lambda_kd, self.lambda_amp
            )));
        }
        if self.lambda_kd > 0.0 && !self.layers.iter().any(|&l| l) {
            return Err(Error::Config(
                "lambda_kd > 0 requires at least one toggled layer".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared difference.
pub fn mse_distance(tape: &mut GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(&d, &d)?;
    Ok(tape.mean_all(&sq))
}

/// 1 - mean SSIM over (batch, channel) slices with global per-slice
/// statistics; stabilization constants use L = max(|a|inf, |b|inf, 1),
/// treated as fixed w.r.t. gradients.
pub fn ssim_distance(tape: &mut GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    crate::tensor::same_shape_pub(a, b, "ssim_distance")?;
    if a.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "ssim_distance expects NCHW tensors, got rank {}",
            a.shape().len()
        )));
    }
    let linf = a
        .data()
        .iter()
        .chain(b.data())
        .fold(1.0f32, |m, &v| m.max(v.abs()));
    let c1 = (0.01 * linf) * (0.01 * linf);
    let c2 = (0.03 * linf) * (0.03 * linf);

    let mu_a = tape.spatial_mean(a)?;
    let mu_b = tape.spatial_mean(b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let m_aa = tape.spatial_mean(&aa)?;
    let m_bb = tape.spatial_mean(&bb)?;
    let m_ab = tape.spatial_mean(&ab)?;

    let mu_a2 = tape.mul(&mu_a, &mu_a)?;
    let mu_b2 = tape.mul(&mu_b, &mu_b)?;
    let mu_ab = tape.mul(&mu_a, &mu_b)?;
    let var_a = tape.sub(&m_aa, &mu_a2)?;
    let var_b = tape.sub(&m_bb, &mu_b2)?;
    let cov = tape.sub(&m_ab, &mu_ab)?;

    let two_mu = tape.scale(&mu_ab, 2.0);
    let num1 = tape.add_scalar(&two_mu, c1);
    let two_cov = tape.scale(&cov, 2.0);
    let num2 = tape.add_scalar(&two_cov, c2);
    let num = tape.mul(&num1, &num2)?;

    let mu_sum = tape.add(&mu_a2, &mu_b2)?;
    let den1 = tape.add_scalar(&mu_sum, c1);
    let var_sum = tape.add(&var_a, &var_b)?;
    let den2 = tape.add_scalar(&var_sum, c2);
    let den = tape.mul(&den1, &den2)?;

    let ssim = tape.div(&num, &den)?;
    let mean = tape.mean_all(&ssim);
    let neg = tape.neg(&mean);
    Ok(tape.add_scalar(&neg, 1.0))
}

/// Frequency-domain distillation distance: quadratic difference of
/// unit-modulus phase vectors, plus an optional log-amplitude term weighted
/// by `lambda_amp`. Blind to uniform positive scaling when the amplitude
/// term is off.
pub fn spectral_distance(
    tape: &mut GradTape,
    teacher: &Tensor,
    student: &Tensor,
    cfg: &DistillLossConfig,
) -> Result<Tensor> {
    crate::tensor::same_shape_pub(teacher, student, "spectral_distance")?;
    let ft = tape.fft2(teacher)?;
    let fs = tape.fft2(student)?;
    let ut = tape.unit_phase(&ft)?;
    let us = tape.unit_phase(&fs)?;
    let d = tape.sub(&ut, &us)?;
    let sq = tape.mul(&d, &d)?;
    // The packed layout holds 2C channels; the mean over it is half the
    // per-bin |.|^2 mean, so scale back up by 2.
    let m = tape.mean_all(&sq);
    let mut total = tape.scale(&m, 2.0);
    if cfg.lambda_amp > 0.0 {
        let at = tape.amplitude(&ft)?;
        let as_ = tape.amplitude(&fs)?;
        let lt = tape.log1p(&at);
        let ls = tape.log1p(&as_);
        let ad = tape.sub(&lt, &ls)?;
        let asq = tape.mul(&ad, &ad)?;
        let am = tape.mean_all(&asq);
        let weighted = tape.scale(&am, cfg.lambda_amp);
        total = tape.add(&total, &weighted)?;
    }
    Ok(total)
}

/// Distance dispatch used by the distillation stages.
pub fn distill_distance(
    tape: &mut GradTape,
    teacher: &Tensor,
    student: &Tensor,
    cfg: &DistillLossConfig,
) -> Result<Tensor> {
    match cfg.kind {
        DistillKind::FeatureMse => mse_distance(tape, teacher, student),
        DistillKind::FeatureSsim => ssim_distance(tape, teacher, student),
        DistillKind::SpectralPhase => spectral_distance(tape, teacher, student, cfg),
    }
}

// ---------------------------------------------------------------------------
// Detection task loss
// ---------------------------------------------------------------------------

/// Axis-aligned ground-truth box in absolute image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    pub class: usize,
}

impl GtBox {
    pub fn area(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn iou(&self, other: &GtBox) -> f32 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One pyramid level's dense prediction map, channels
/// [objectness, class logits.., tx, ty, tw, th], plus its stride.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub map: Tensor,
    pub stride: usize,
}

/// Range clamp applied to log-size offsets before exponentiation.
pub const BOX_LOG_RANGE: f32 = 4.0;
const W_OBJ: f32 = 1.0;
const W_CLS: f32 = 0.5;
const W_BOX: f32 = 2.0;

/// A positive cell assignment: which cell predicts which ground-truth box.
#[derive(Debug, Clone, Copy)]
struct PositiveCell {
    n: usize,
    i: usize,
    j: usize,
    gt: GtBox,
}

/// Buckets ground-truth boxes by pyramid level (max side under 1/8 of the
/// image goes to the finest level, under 1/4 to the middle, rest to the
/// coarsest) and marks every cell whose center falls inside the box.
/// Overlap ties go to the smaller box.
fn assign_positives(
    levels: &[LevelPrediction],
    targets: &[Vec<GtBox>],
    image_size: usize,
) -> Result<Vec<Vec<PositiveCell>>> {
    let t_fine = image_size as f32 / 8.0;
    let t_mid = image_size as f32 / 4.0;
    let mut per_level: Vec<Vec<PositiveCell>> = vec![Vec::new(); levels.len()];
    for (n, boxes) in targets.iter().enumerate() {
        for gt in boxes {
            let side = (gt.x_max - gt.x_min).max(gt.y_max - gt.y_min);
            let li = if side < t_fine {
                0
            } else if side < t_mid {
                1
            } else {
                2
            };
            let li = li.min(levels.len() - 1);
            let lvl = &levels[li];
            let (_, _, h, w) = crate::tensor::rank4_dims(&lvl.map)?;
            let s = lvl.stride as f32;
            for i in 0..h {
                let cy = (i as f32 + 0.5) * s;
                if cy < gt.y_min || cy >= gt.y_max {
                    continue;
                }
                for j in 0..w {
                    let cx = (j as f32 + 0.5) * s;
                    if cx < gt.x_min || cx >= gt.x_max {
                        continue;
                    }
                    per_level[li].push(PositiveCell { n, i, j, gt: *gt });
                }
            }
        }
    }
    // A cell claimed by several boxes keeps only the smallest one.
    for cells in per_level.iter_mut() {
        cells.sort_by(|a, b| {
            (a.n, a.i, a.j)
                .cmp(&(b.n, b.i, b.j))
                .then(a.gt.area().partial_cmp(&b.gt.area()).unwrap_or(std::cmp::Ordering::Equal))
        });
        cells.dedup_by_key(|c| (c.n, c.i, c.j));
    }
    Ok(per_level)
}

/// Dense anchor-free detection loss: objectness BCE over every cell,
/// class BCE and an IoU box term over positive cells, combined with
/// weights 1.0 / 0.5 / 2.0. Images without targets contribute only the
/// objectness term.
pub fn detection_loss(
    tape: &mut GradTape,
    levels: &[LevelPrediction],
    targets: &[Vec<GtBox>],
    image_size: usize,
) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::Contract("detection_loss needs at least one level".into()));
    }
    let (n0, c0, _, _) = crate::tensor::rank4_dims(&levels[0].map)?;
    if c0 < 6 {
        return Err(Error::Dimension(format!(
            "prediction maps need objectness + classes + 4 box channels, got {c0}"
        )));
    }
    let num_classes = c0 - 5;
    for lvl in levels {
        let (n, c, _, _) = crate::tensor::rank4_dims(&lvl.map)?;
        if n != n0 || c != c0 {
            return Err(Error::Dimension(
                "prediction levels disagree on batch or channel extents".into(),
            ));
        }
    }
    if targets.len() != n0 {
        return Err(Error::Dimension(format!(
            "{} target lists for a batch of {n0}",
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().flatten().find(|b| b.class >= num_classes) {
        return Err(Error::Contract(format!(
            "target class {} out of range for {num_classes} classes",
            bad.class
        )));
    }

    let positives = assign_positives(levels, targets, image_size)?;

    // Objectness over all cells of all levels.
    let mut obj_sum: Option<Tensor> = None;
    let mut total_cells = 0usize;
    for (li, lvl) in levels.iter().enumerate() {
        let (n, _, h, w) = crate::tensor::rank4_dims(&lvl.map)?;
        let mut t = vec![0.0f32; n * h * w];
        for p in &positives[li] {
            t[(p.n * h + p.i) * w + p.j] = 1.0;
        }
        let obj = tape.slice_channels(&lvl.map, 0, 1)?;
        let bce = tape.bce_with_logits(&obj, &t)?;
        let s = tape.sum_all(&bce);
        total_cells += n * h * w;
        obj_sum = Some(match obj_sum {
            Some(acc) => tape.add(&acc, &s)?,
            None => s,
        });
    }
    let obj_loss = tape.scale(&obj_sum.expect("at least one level"), 1.0 / total_cells as f32);
    let mut loss = tape.scale(&obj_loss, W_OBJ);

    let num_pos: usize = positives.iter().map(|v| v.len()).sum();
    if num_pos == 0 {
        return Ok(loss);
    }

    // Class and box terms, gathered per level.
    let mut cls_sum: Option<Tensor> = None;
    let mut iou_sum: Option<Tensor> = None;
    for (li, cells) in positives.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let lvl = &levels[li];
        let (_, c, h, w) = crate::tensor::rank4_dims(&lvl.map)?;
        let at = |n: usize, ch: usize, i: usize, j: usize| ((n * c + ch) * h + i) * w + j;

        // Class logits: every class channel at every positive cell.
        let mut idx = Vec::with_capacity(cells.len() * num_classes);
        let mut t = Vec::with_capacity(cells.len() * num_classes);
        for cell in cells {
            for k in 0..num_classes {
                idx.push(at(cell.n, 1 + k, cell.i, cell.j));
                t.push(if k == cell.gt.class { 1.0 } else { 0.0 });
            }
        }
        let logits = tape.gather(&lvl.map, &idx)?;
        let bce = tape.bce_with_logits(&logits, &t)?;
        let s = tape.sum_all(&bce);
        cls_sum = Some(match cls_sum {
            Some(acc) => tape.add(&acc, &s)?,
            None => s,
        });

        // Box decode and IoU against the assigned ground truth.
        let s_f = lvl.stride as f32;
        let base = 1 + num_classes;
        let pick = |tape: &mut GradTape, ch: usize| -> Result<Tensor> {
            let idx: Vec<usize> =
                cells.iter().map(|cl| at(cl.n, base + ch, cl.i, cl.j)).collect();
            tape.gather(&lvl.map, &idx)
        };
        let tx = pick(tape, 0)?;
        let ty = pick(tape, 1)?;
        let tw = pick(tape, 2)?;
        let th = pick(tape, 3)?;

        let cx0: Vec<f32> = cells.iter().map(|cl| (cl.j as f32 + 0.5) * s_f).collect();
        let cy0: Vec<f32> = cells.iter().map(|cl| (cl.i as f32 + 0.5) * s_f).collect();
        let len = cells.len();
        let cx0 = Tensor::new(&[len], cx0)?;
        let cy0 = Tensor::new(&[len], cy0)?;

        let tx_s = tape.scale(&tx, s_f);
        let cx = tape.add(&tx_s, &cx0)?;
        let ty_s = tape.scale(&ty, s_f);
        let cy = tape.add(&ty_s, &cy0)?;
        let tw_c = tape.clamp(&tw, -BOX_LOG_RANGE, BOX_LOG_RANGE);
        let th_c = tape.clamp(&th, -BOX_LOG_RANGE, BOX_LOG_RANGE);
        let ew = tape.exp(&tw_c);
        let eh = tape.exp(&th_c);
        let bw = tape.scale(&ew, s_f);
        let bh = tape.scale(&eh, s_f);

        let half_w = tape.scale(&bw, 0.5);
        let half_h = tape.scale(&bh, 0.5);
        let x1 = tape.sub(&cx, &half_w)?;
        let x2 = tape.add(&cx, &half_w)?;
        let y1 = tape.sub(&cy, &half_h)?;
        let y2 = tape.add(&cy, &half_h)?;

        let gx1 = Tensor::new(&[len], cells.iter().map(|c| c.gt.x_min).collect())?;
        let gy1 = Tensor::new(&[len], cells.iter().map(|c| c.gt.y_min).collect())?;
        let gx2 = Tensor::new(&[len], cells.iter().map(|c| c.gt.x_max).collect())?;
        let gy2 = Tensor::new(&[len], cells.iter().map(|c| c.gt.y_max).collect())?;

        let ix1 = tape.max2(&x1, &gx1)?;
        let ix2 = tape.min2(&x2, &gx2)?;
        let iy1 = tape.max2(&y1, &gy1)?;
        let iy2 = tape.min2(&y2, &gy2)?;
        let iw_raw = tape.sub(&ix2, &ix1)?;
        let ih_raw = tape.sub(&iy2, &iy1)?;
        let iw = tape.relu(&iw_raw);
        let ih = tape.relu(&ih_raw);
        let inter = tape.mul(&iw, &ih)?;

        let pred_area = tape.mul(&bw, &bh)?;
        let gt_area = Tensor::new(&[len], cells.iter().map(|c| c.gt.area()).collect())?;
        let area_sum = tape.add(&pred_area, &gt_area)?;
        let union_raw = tape.sub(&area_sum, &inter)?;
        let union = tape.add_scalar(&union_raw, 1e-6);
        let iou = tape.div(&inter, &union)?;
        let s2 = tape.sum_all(&iou);
        iou_sum = Some(match iou_sum {
            Some(acc) => tape.add(&acc, &s2)?,
            None => s2,
        });
    }

    let cls = cls_sum.expect("positives imply class terms");
    let cls_mean = tape.scale(&cls, 1.0 / (num_pos * num_classes) as f32);
    let cls_w = tape.scale(&cls_mean, W_CLS);
    loss = tape.add(&loss, &cls_w)?;

    let iou_mean = tape.scale(&iou_sum.expect("positives imply box terms"), 1.0 / num_pos as f32);
    let neg = tape.neg(&iou_mean);
    let box_loss = tape.add_scalar(&neg, 1.0);
    let box_w = tape.scale(&box_loss, W_BOX);
    loss = tape.add(&loss, &box_w)?;
    Ok(loss)
}

/// Decodes one cell's box offsets into absolute coordinates; the exact
/// inverse of the loss-side parameterization, shared with inference.
pub fn decode_box(
    stride: usize,
    i: usize,
    j: usize,
    tx: f32,
    ty: f32,
    tw: f32,
    th: f32,
) -> (f32, f32, f32, f32) {
    let s = stride as f32;
    let cx = (j as f32 + 0.5 + tx) * s;
    let cy = (i as f32 + 0.5 + ty) * s;
    let w = s * tw.clamp(-BOX_LOG_RANGE, BOX_LOG_RANGE).exp();
    let h = s * th.clamp(-BOX_LOG_RANGE, BOX_LOG_RANGE).exp();
    (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Inverse of [`decode_box`] for constructing saturated oracle inputs.
pub fn encode_box(stride: usize, i: usize, j: usize, gt: &GtBox) -> (f32, f32, f32, f32) {
    let s = stride as f32;
    let cx = 0.5 * (gt.x_min + gt.x_max);
    let cy = 0.5 * (gt.y_min + gt.y_max);
    let tx = cx / s - j as f32 - 0.5;
    let ty = cy / s - i as f32 - 0.5;
    let tw = ((gt.x_max - gt.x_min) / s).ln();
    let th = ((gt.y_max - gt.y_min) / s).ln();
    (tx, ty, tw, th)
}

/// Combined stage objective: task + lambda_kd * mean(toggled distill terms).
pub fn stage_objective(
    tape: &mut GradTape,
    task: &Tensor,
    distill_terms: &[Option<Tensor>; 3],
    cfg: &DistillLossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut total = task.clone();
    if cfg.lambda_kd == 0.0 {
        return Ok(total);
    }
    let mut sum: Option<Tensor> = None;
    let mut count = 0usize;
    for (li, toggled) in cfg.layers.iter().enumerate() {
        if !toggled {
            continue;
        }
        let term = distill_terms[li].as_ref().ok_or_else(|| {
            Error::Contract(format!("layer P{} toggled but no distill term supplied", li + 3))
        })?;
        count += 1;
        sum = Some(match sum {
            Some(acc) => tape.add(&acc, term)?,
            None => term.clone(),
        });
    }
    if let Some(s) = sum {
        let mean = tape.scale(&s, 1.0 / count as f32);
        let weighted = tape.scale(&mean, cfg.lambda_kd);
        total = tape.add(&total, &weighted)?;
    }
    Ok(total)
}
