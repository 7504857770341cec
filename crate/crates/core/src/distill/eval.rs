//! Detection evaluation: greedy IoU matching and 101-point interpolated
//! average precision over a threshold sweep.

use crate::error::{Error, Result};
use crate::losses::GtBox;
use crate::models::{decode_predictions, nms, Detection, Detector};
use crate::synthdata::{batch_tensor, ImageSample};

/// Score floor for decoding during evaluation.
pub const EVAL_CONF_THRESHOLD: f32 = 0.05;
/// NMS IoU threshold during evaluation.
pub const EVAL_NMS_IOU: f32 = 0.5;
/// Detections kept per image after NMS.
pub const EVAL_MAX_DETS: usize = 100;
/// Evaluation forward-pass batch size.
const EVAL_BATCH: usize = 32;

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

/// Average precision for one class at one IoU threshold; `None` when the
/// class has no ground truth (excluded from the mean, COCO-style).
fn ap_single(
    detections: &[(usize, Detection)],
    gts: &[Vec<GtBox>],
    class: usize,
    iou_thr: f64,
) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    // Detections arrive pre-sorted by score; match greedily against the
    // best unmatched ground truth of the same image and class.
    let mut matched: Vec<Vec<bool>> =
        gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::new();
    for &(img, det) in detections.iter().filter(|(_, d)| d.class == class) {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[img].iter().enumerate() {
            if gt.class != class || matched[img][gi] {
                continue;
            }
            let iou = det.as_box().iou(gt) as f64;
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[img][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // Precision/recall prefix curve, then 101-point interpolation.
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let mut n_tp = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            n_tp += 1;
        }
        precisions.push(n_tp as f64 / (k + 1) as f64);
        recalls.push(n_tp as f64 / num_gt as f64);
    }
    // Monotone non-increasing envelope from the right.
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let want = r as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= want)
            .map_or(0.0, |at| precisions[at]);
        ap += p;
    }
    Some(ap / 101.0)
}

/// Mean-over-classes AP at each requested threshold. Detections must carry
/// their image index; the function sorts them by score (stable on input
/// order for ties).
pub fn average_precision(
    detections: &[(usize, Detection)],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
        return Err(Error::Contract(format!("iou thresholds must lie in (0,1): {thresholds:?}")));
    }
    if gts.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty dataset".into()));
    }
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut acc = 0.0;
        let mut n = 0usize;
        for class in 0..num_classes {
            if let Some(ap) = ap_single(&sorted, gts, class, thr) {
                acc += ap;
                n += 1;
            }
        }
        out.push(if n == 0 { 0.0 } else { acc / n as f64 });
    }
    Ok(out)
}

/// Runs a detector over samples and collects per-image detections after
/// NMS and the per-image cap.
pub fn collect_detections(
    det: &Detector,
    samples: &[ImageSample],
) -> Result<Vec<Vec<Detection>>> {
    let mut all = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (images, _) = batch_tensor(&refs);
        let out = det.infer(&images)?;
        let decoded = decode_predictions(&out.predictions, EVAL_CONF_THRESHOLD)?;
        for dets in decoded {
            let mut kept = nms(&dets, EVAL_NMS_IOU)?;
            kept.truncate(EVAL_MAX_DETS);
            all.push(kept);
        }
    }
    Ok(all)
}

/// Full evaluation of a detector: AP@0.5, AP@0.75 and COCO-style mAP over
/// the 0.50:0.05:0.95 sweep.
pub fn evaluate_detector(det: &Detector, samples: &[ImageSample], num_classes: usize) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty dataset".into()));
    }
    let per_image = collect_detections(det, samples)?;
    let mut flat = Vec::new();
    for (i, dets) in per_image.iter().enumerate() {
        for d in dets {
            flat.push((i, *d));
        }
    }
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let sweep = coco_thresholds();
    let aps = average_precision(&flat, &gts, num_classes, &sweep)?;
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(EvalResult { ap50: aps[0], ap75: aps[5], map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f32, y: f32, s: f32, class: usize, score: f32) -> Detection {
        Detection { x_min: x, y_min: y, x_max: x + s, y_max: y + s, class, score }
    }

    fn gt(x: f32, y: f32, s: f32, class: usize) -> GtBox {
        GtBox { x_min: x, y_min: y, x_max: x + s, y_max: y + s, class }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 0), gt(30.0, 30.0, 12.0, 1)], vec![gt(5.0, 5.0, 8.0, 2)]];
        let dets = vec![
            (0, det(0.0, 0.0, 10.0, 0, 1.0)),
            (0, det(30.0, 30.0, 12.0, 1, 1.0)),
            (1, det(5.0, 5.0, 8.0, 2, 1.0)),
        ];
        let aps = average_precision(&dets, &gts, 3, &coco_thresholds()).unwrap();
        for ap in aps {
            assert!((ap - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 0)]];
        let aps = average_precision(&[], &gts, 3, &[0.5]).unwrap();
        assert_eq!(aps[0], 0.0);
    }

    #[test]
    fn empty_dataset_is_contract_error() {
        assert!(matches!(
            average_precision(&[], &[], 3, &[0.5]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            average_precision(&[], &[vec![]], 3, &[1.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn three_detections_two_gts_matches_hand_enumeration() {
        // One image, class 0, two ground truths. Three detections sorted by
        // score: hit, miss, hit.
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 0), gt(40.0, 40.0, 10.0, 0)]];
        let dets = vec![
            (0, det(0.0, 0.0, 10.0, 0, 0.9)),   // TP (IoU 1.0)
            (0, det(20.0, 20.0, 10.0, 0, 0.8)), // FP
            (0, det(40.0, 41.0, 10.0, 0, 0.7)), // TP (IoU 9/11 = 0.818)
        ];
        // Precision prefix: [1, 1/2, 2/3]; recall prefix: [1/2, 1/2, 1].
        // Envelope: [1, 2/3, 2/3]. 101-point: recalls 0..=50 -> 1.0,
        // 51..=100 -> 2/3.
        let expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let aps = average_precision(&dets, &gts, 1, &[0.5]).unwrap();
        assert!((aps[0] - expect).abs() < 1e-9, "{} vs {expect}", aps[0]);

        // At IoU 0.9 the third detection no longer matches.
        let aps = average_precision(&dets, &gts, 1, &[0.9]).unwrap();
        let expect_strict = (51.0 * 1.0) / 101.0;
        assert!((aps[0] - expect_strict).abs() < 1e-9);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 0)]];
        let dets = vec![
            (0, det(0.0, 0.0, 10.0, 0, 0.9)),
            (0, det(0.0, 0.0, 10.0, 0, 0.8)), // duplicate: FP
        ];
        let aps = average_precision(&dets, &gts, 1, &[0.5]).unwrap();
        assert!((aps[0] - 1.0).abs() < 1e-9, "duplicate should not reduce interpolated AP");
        // ... but precision at full recall reflects the FP through the
        // envelope when the duplicate outranks the hit.
        let dets_swapped = vec![
            (0, det(20.0, 20.0, 10.0, 0, 0.95)), // FP first
            (0, det(0.0, 0.0, 10.0, 0, 0.9)),
        ];
        let aps = average_precision(&dets_swapped, &gts, 1, &[0.5]).unwrap();
        assert!((aps[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 0)]];
        let dets = vec![(0, det(0.0, 0.0, 10.0, 0, 0.9))];
        // Classes 1 and 2 have no ground truth anywhere: mean covers class 0 only.
        let aps = average_precision(&dets, &gts, 3, &[0.5]).unwrap();
        assert!((aps[0] - 1.0).abs() < 1e-9);
    }
}
