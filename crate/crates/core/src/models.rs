//! The three-scale toy detector family: a shared stem/downsampling trunk,
//! a top-down FPN producing P3/P4/P5 feature taps, per-level dense heads,
//! and the channel-matching projector used during distillation.

use crate::error::{Error, Result};
use crate::losses::{decode_box, GtBox, LevelPrediction};
use crate::tensor::{GradTape, Gradients, Parameter, Tensor};
use crate::util::{child_seed, rng};
use rand::Rng;
use rand_distr::StandardNormal;

/// Canonical input resolution; every dataset image and model expects it.
pub const IMAGE_SIZE: usize = 64;
/// FPN strides for P3, P4, P5.
pub const STRIDES: [usize; 3] = [4, 8, 16];
/// Default nonlinearity slope.
pub const LEAKY_SLOPE: f32 = 0.1;

/// Model scale; width ratios mirror a tiny/large/x-large family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scale {
    Tiny,
    Junior,
    Senior,
}

impl Scale {
    pub fn base_channels(&self) -> usize {
        match self {
            Scale::Tiny => 16,
            Scale::Junior => 32,
            Scale::Senior => 48,
        }
    }

    /// Channel widths at P3/P4/P5: (c, 2c, 4c).
    pub fn level_channels(&self) -> [usize; 3] {
        let c = self.base_channels();
        [c, 2 * c, 4 * c]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scale::Tiny => "tiny",
            Scale::Junior => "junior",
            Scale::Senior => "senior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "junior" => Ok(Scale::Junior),
            "senior" => Ok(Scale::Senior),
            other => Err(Error::Config(format!(
                "unknown scale {other:?}, expected tiny|junior|senior"
            ))),
        }
    }

    fn from_base_channels(c: usize) -> Result<Self> {
        match c {
            16 => Ok(Scale::Tiny),
            32 => Ok(Scale::Junior),
            48 => Ok(Scale::Senior),
            other => Err(Error::Config(format!("no scale has base width {other}"))),
        }
    }
}

/// Detector construction request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorSpec {
    pub scale: Scale,
    pub num_classes: usize,
    pub seed: u64,
}

// Parameter layout indices; construction and forward share this order.
const STEM: usize = 0;
const DOWN1: usize = 1;
const DOWN2: usize = 2;
const DOWN3: usize = 3;
const P5_CONV: usize = 4;
const LAT5: usize = 5;
const P4_CONV: usize = 6;
const LAT4: usize = 7;
const P3_CONV: usize = 8;
const HID3: usize = 9;
const HID4: usize = 10;
const HID5: usize = 11;
const HEAD3: usize = 12;
const HEAD4: usize = 13;
const HEAD5: usize = 14;
const NUM_LAYERS: usize = 15;

/// (name, out_channels, in_channels, kernel, stride, pad) per layer for a
/// given base width and class count.
fn layer_defs(c: usize, k: usize) -> [(&'static str, usize, usize, usize, usize, usize); NUM_LAYERS] {
    let head = 5 + k;
    [
        ("stem", c, 3, 3, 2, 1),
        ("down1", c, c, 3, 2, 1),
        ("down2", 2 * c, c, 3, 2, 1),
        ("down3", 4 * c, 2 * c, 3, 2, 1),
        ("p5_conv", 4 * c, 4 * c, 3, 1, 1),
        ("lat5", 2 * c, 4 * c, 1, 1, 0),
        ("p4_conv", 2 * c, 4 * c, 3, 1, 1),
        ("lat4", c, 2 * c, 1, 1, 0),
        ("p3_conv", c, 2 * c, 3, 1, 1),
        ("hid3", c, c, 3, 1, 1),
        ("hid4", 2 * c, 2 * c, 3, 1, 1),
        ("hid5", 4 * c, 4 * c, 3, 1, 1),
        ("head3", head, c, 1, 1, 0),
        ("head4", head, 2 * c, 1, 1, 0),
        ("head5", head, 4 * c, 1, 1, 0),
    ]
}

/// A detector instance: named parameters in fixed layout order.
#[derive(Debug, Clone)]
pub struct Detector {
    pub spec: DetectorSpec,
    params: Vec<Parameter>,
}

/// Forward outputs: FPN feature taps and dense per-level predictions.
pub struct DetectorOutput {
    /// P3, P4, P5 (after the merge convs and activation).
    pub features: [Tensor; 3],
    pub predictions: Vec<LevelPrediction>,
}

/// Builds a detector with He fan-in initialization, deterministic in the
/// spec seed. Objectness biases start negative so fresh models predict
/// background.
pub fn build_detector(spec: &DetectorSpec) -> Result<Detector> {
    if spec.num_classes == 0 {
        return Err(Error::Contract("num_classes must be >= 1".into()));
    }
    let c = spec.scale.base_channels();
    let mut rng = rng(child_seed(spec.seed, "detector-init", c as u64));
    let mut params = Vec::with_capacity(NUM_LAYERS * 2);
    for (name, co, ci, k, _, _) in layer_defs(c, spec.num_classes) {
        let fan_in = ci * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f32> = (0..co * ci * k * k)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        params.push(Parameter::new(
            format!("{name}.weight"),
            Tensor::new(&[co, ci, k, k], w)?,
        ));
        let mut b = vec![0.0f32; co];
        if name.starts_with("head") {
            b[0] = -2.0; // objectness prior
            // Box size prior: start at 1.5x the level stride, the middle of
            // each level's assigned size band.
            let k = co - 5;
            b[k + 3] = 0.405;
            b[k + 4] = 0.405;
        }
        params.push(Parameter::new(format!("{name}.bias"), Tensor::new(&[co], b)?));
    }
    Ok(Detector { spec: *spec, params })
}

impl Detector {
    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    /// CRC over all parameter bits; used to verify freeze contracts.
    pub fn content_crc(&self) -> u32 {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::util::crc32(&bytes)
    }

    /// Registers parameters on the tape (frozen ones stay constant) and
    /// returns them in layout order for the forward pass.
    pub fn bind(&self, tape: &mut GradTape) -> Vec<Tensor> {
        self.params.iter().map(|p| p.bind(tape)).collect()
    }

    /// Copies gradients for this detector's bound tensors back into the
    /// parameter buffers.
    pub fn absorb_grads(&mut self, bound: &[Tensor], grads: &mut Gradients) {
        crate::tensor::absorb_grads(&mut self.params, bound, grads);
    }

    /// Runs the trunk, FPN and heads. `bound` must come from
    /// [`Detector::bind`] on the same tape.
    pub fn forward(&self, tape: &mut GradTape, bound: &[Tensor], x: &Tensor) -> Result<DetectorOutput> {
        let (_, ci, h, w) = crate::tensor::rank4_dims(x)?;
        if ci != 3 || h != IMAGE_SIZE || w != IMAGE_SIZE {
            return Err(Error::Dimension(format!(
                "detector input must be Nx3x{IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                x.shape()
            )));
        }
        let c = self.spec.scale.base_channels();
        let defs = layer_defs(c, self.spec.num_classes);
        let conv = |tape: &mut GradTape, li: usize, input: &Tensor| -> Result<Tensor> {
            let (_, _, _, _, stride, pad) = defs[li];
            tape.conv2d(input, &bound[2 * li], &bound[2 * li + 1], stride, pad)
        };
        let block = |tape: &mut GradTape, li: usize, input: &Tensor| -> Result<Tensor> {
            let y = conv(tape, li, input)?;
            tape.leaky_relu(&y, LEAKY_SLOPE)
        };

        let s = block(tape, STEM, x)?;
        let c3 = block(tape, DOWN1, &s)?;
        let c4 = block(tape, DOWN2, &c3)?;
        let c5 = block(tape, DOWN3, &c4)?;

        let p5 = block(tape, P5_CONV, &c5)?;
        let l5 = conv(tape, LAT5, &p5)?;
        let u5 = tape.upsample2_nearest(&l5)?;
        let m4 = tape.concat_channels(&c4, &u5)?;
        let p4 = block(tape, P4_CONV, &m4)?;
        let l4 = conv(tape, LAT4, &p4)?;
        let u4 = tape.upsample2_nearest(&l4)?;
        let m3 = tape.concat_channels(&c3, &u4)?;
        let p3 = block(tape, P3_CONV, &m3)?;

        let h3 = block(tape, HID3, &p3)?;
        let h4 = block(tape, HID4, &p4)?;
        let h5 = block(tape, HID5, &p5)?;
        let predictions = vec![
            LevelPrediction { map: conv(tape, HEAD3, &h3)?, stride: STRIDES[0] },
            LevelPrediction { map: conv(tape, HEAD4, &h4)?, stride: STRIDES[1] },
            LevelPrediction { map: conv(tape, HEAD5, &h5)?, stride: STRIDES[2] },
        ];
        Ok(DetectorOutput { features: [p3, p4, p5], predictions })
    }

    /// Convenience forward without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<DetectorOutput> {
        let mut tape = GradTape::new();
        let bound: Vec<Tensor> = self.params.iter().map(|p| p.value.clone()).collect();
        self.forward(&mut tape, &bound, x)
    }

    pub fn save(&self, path: &std::path::Path, role: &str) -> Result<()> {
        let prefixed: Vec<Parameter> = self
            .params
            .iter()
            .map(|p| Parameter::new(format!("{role}.{}", p.name), p.value.clone()))
            .collect();
        crate::tensor::save_checkpoint(path, &prefixed)
    }

    /// Loads a checkpoint written by [`Detector::save`], inferring the scale
    /// from the stem width and the class count from the head extent.
    pub fn load(path: &std::path::Path) -> Result<(String, Detector)> {
        let entries = crate::tensor::load_checkpoint(path)?;
        if entries.is_empty() {
            return Err(Error::parse(path, "checkpoint holds no parameters"));
        }
        let role = entries[0]
            .0
            .split('.')
            .next()
            .ok_or_else(|| Error::parse(path, "unprefixed parameter name"))?
            .to_string();
        let stem = entries
            .iter()
            .find(|(n, _)| n == &format!("{role}.stem.weight"))
            .ok_or_else(|| Error::parse(path, "missing stem.weight"))?;
        let c = stem.1.shape()[0];
        let scale = Scale::from_base_channels(c)?;
        let head = entries
            .iter()
            .find(|(n, _)| n == &format!("{role}.head3.weight"))
            .ok_or_else(|| Error::parse(path, "missing head3.weight"))?;
        let num_classes = head.1.shape()[0] - 5;
        let spec = DetectorSpec { scale, num_classes, seed: 0 };
        let mut det = build_detector(&spec)?;
        for p in det.params.iter_mut() {
            let want = format!("{role}.{}", p.name);
            let found = entries
                .iter()
                .find(|(n, _)| n == &want)
                .ok_or_else(|| Error::parse(path, format!("missing parameter {want}")))?;
            if found.1.shape() != p.value.shape() {
                return Err(Error::parse(
                    path,
                    format!(
                        "parameter {want} has shape {:?}, expected {:?}",
                        found.1.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = found.1.clone();
        }
        Ok((role, det))
    }
}

// ---------------------------------------------------------------------------
// Projector
// ---------------------------------------------------------------------------

/// One 1x1 convolution per FPN level mapping learner channels onto teacher
/// channels. Owned and trained by the learner side; fresh per stage.
#[derive(Debug, Clone)]
pub struct Projector {
    params: Vec<Parameter>,
    student_channels: [usize; 3],
    teacher_channels: [usize; 3],
}

/// Identity on the overlapping channel block; rows beyond the learner's
/// width start as small noise so their spectra are never degenerate.
/// Matching widths start as an exact identity.
pub fn build_projector(student: Scale, teacher: Scale) -> Projector {
    let sc = student.level_channels();
    let tc = teacher.level_channels();
    let mut noise = rng(child_seed(
        (student.base_channels() * 64 + teacher.base_channels()) as u64,
        "projector-init",
        0,
    ));
    let mut params = Vec::with_capacity(6);
    for li in 0..3 {
        let (cs, ct) = (sc[li], tc[li]);
        let mut w = vec![0.0f32; ct * cs];
        for o in 0..ct.min(cs) {
            w[o * cs + o] = 1.0;
        }
        for o in cs.min(ct)..ct {
            for i in 0..cs {
                w[o * cs + i] = (noise.sample::<f64, _>(StandardNormal) * 0.05) as f32;
            }
        }
        params.push(Parameter::new(
            format!("p{}.weight", li + 3),
            Tensor::new(&[ct, cs, 1, 1], w).expect("projector weight shape"),
        ));
        params.push(Parameter::new(
            format!("p{}.bias", li + 3),
            Tensor::zeros(&[ct]),
        ));
    }
    Projector { params, student_channels: sc, teacher_channels: tc }
}

impl Projector {
    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut GradTape) -> Vec<Tensor> {
        self.params.iter().map(|p| p.bind(tape)).collect()
    }

    pub fn absorb_grads(&mut self, bound: &[Tensor], grads: &mut Gradients) {
        crate::tensor::absorb_grads(&mut self.params, bound, grads);
    }

    /// Maps learner features into the teacher's channel widths.
    pub fn project(
        &self,
        tape: &mut GradTape,
        bound: &[Tensor],
        feats: &[Tensor; 3],
    ) -> Result<[Tensor; 3]> {
        let mut out = Vec::with_capacity(3);
        for li in 0..3 {
            let (_, c, _, _) = crate::tensor::rank4_dims(&feats[li])?;
            if c != self.student_channels[li] {
                return Err(Error::Dimension(format!(
                    "projector level P{} expects {} input channels, got {c}",
                    li + 3,
                    self.student_channels[li]
                )));
            }
            let y = tape.conv2d(&feats[li], &bound[2 * li], &bound[2 * li + 1], 1, 0)?;
            out.push(y);
        }
        Ok([out.remove(0), out.remove(0), out.remove(0)])
    }

    pub fn teacher_channels(&self) -> [usize; 3] {
        self.teacher_channels
    }
}

// ---------------------------------------------------------------------------
// Decoding and NMS
// ---------------------------------------------------------------------------

/// A decoded detection in absolute image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    pub class: usize,
    pub score: f32,
}

impl Detection {
    pub fn as_box(&self) -> GtBox {
        GtBox {
            x_min: self.x_min,
            y_min: self.y_min,
            x_max: self.x_max,
            y_max: self.y_max,
            class: self.class,
        }
    }

    pub fn iou(&self, other: &Detection) -> f32 {
        self.as_box().iou(&other.as_box())
    }
}

/// Turns dense prediction maps into per-image detections above a confidence
/// threshold, clipped to the image bounds. Score = sigmoid(objectness) *
/// sigmoid(class logit), emitted per class.
pub fn decode_predictions(
    levels: &[LevelPrediction],
    conf_threshold: f32,
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Contract(format!(
            "conf_threshold must be in [0,1], got {conf_threshold}"
        )));
    }
    let (n0, c0, _, _) = crate::tensor::rank4_dims(&levels[0].map)?;
    let num_classes = c0 - 5;
    let img = IMAGE_SIZE as f32;
    let mut out: Vec<Vec<Detection>> = vec![Vec::new(); n0];
    for lvl in levels {
        let (n, c, h, w) = crate::tensor::rank4_dims(&lvl.map)?;
        let data = lvl.map.data();
        let at = |ni: usize, ch: usize, i: usize, j: usize| data[((ni * c + ch) * h + i) * w + j];
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let obj = sigmoid(at(ni, 0, i, j));
                    if obj * 1.0 < conf_threshold {
                        continue; // even a perfect class score cannot pass
                    }
                    let (tx, ty, tw, th) = (
                        at(ni, 1 + num_classes, i, j),
                        at(ni, 2 + num_classes, i, j),
                        at(ni, 3 + num_classes, i, j),
                        at(ni, 4 + num_classes, i, j),
                    );
                    let (x1, y1, x2, y2) = decode_box(lvl.stride, i, j, tx, ty, tw, th);
                    let (x1, y1) = (x1.clamp(0.0, img), y1.clamp(0.0, img));
                    let (x2, y2) = (x2.clamp(0.0, img), y2.clamp(0.0, img));
                    if x2 <= x1 || y2 <= y1 {
                        continue;
                    }
                    for k in 0..num_classes {
                        let score = obj * sigmoid(at(ni, 1 + k, i, j));
                        if score >= conf_threshold {
                            out[ni].push(Detection {
                                x_min: x1,
                                y_min: y1,
                                x_max: x2,
                                y_max: y2,
                                class: k,
                                score,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy non-maximum suppression per class: keeps the highest-scored box
/// of every overlapping (IoU > threshold) group.
pub fn nms(detections: &[Detection], iou_threshold: f32) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Contract(format!(
            "iou_threshold must be in (0,1], got {iou_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.iou(d) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    Ok(kept)
}
