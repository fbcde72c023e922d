//! Box decoding, class-wise NMS and average precision.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::assign::{decode_deltas, iou, AnchorSet, BBox};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph};
use crate::params::ParamStore;
use crate::synth::{GtBox, Scene};
use crate::tensor::Tensor;

use super::config::EvalConfig;
use super::model::{Detector, LevelOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Descending score; equal scores keep their relative order under a stable sort.
fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

fn clip(b: BBox, h: usize, w: usize) -> Option<BBox> {
    let c = BBox {
        x1: b.x1.clamp(0.0, w as f64),
        y1: b.y1.clamp(0.0, h as f64),
        x2: b.x2.clamp(0.0, w as f64),
        y2: b.y2.clamp(0.0, h as f64),
    };
    (c.x2 > c.x1 && c.y2 > c.y1).then_some(c)
}

/// Scores above `score_thr`, top `pre_nms_top_k` per level, decoded with
/// `box_stds` and clipped to the image.
pub fn decode_outputs(
    g: &Graph,
    outputs: &[LevelOutput],
    anchors: &AnchorSet,
    image_hw: (usize, usize),
    box_stds: [f64; 4],
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for (o, (level, range, (h, w))) in outputs.iter().zip(&anchors.spans) {
        if o.level != *level {
            return Err(Error::shape("decode_outputs", format!("{} output against {level} anchors", o.level)));
        }
        let hw = h * w;
        let cls = g.value(o.cls).data();
        let reg = g.value(o.reg).data();
        let k = cls.len() / hw;
        let mut cand = Vec::new();
        for c in 0..k {
            for cell in 0..hw {
                let s = sigmoid(cls[c * hw + cell]);
                if s > cfg.score_thr {
                    cand.push((s, c, cell));
                }
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        cand.truncate(cfg.pre_nms_top_k);
        for (score, category, cell) in cand {
            let d = [0, 1, 2, 3].map(|j| reg[j * hw + cell] * box_stds[j]);
            let b = decode_deltas(&anchors.boxes[range.start + cell], d);
            if let Some(bbox) = clip(b, image_hw.0, image_hw.1) {
                all.push(Detection { bbox, category, score });
            }
        }
    }
    Ok(all)
}

/// Greedy class-wise NMS: within each class a detection is dropped when its
/// IoU with a kept, higher-scored one exceeds `iou_thr`. Survivors are
/// sorted by score and truncated to `max_det`.
pub fn nms(dets: &[Detection], iou_thr: f64, max_det: usize) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept.iter().any(|k| k.category == d.category && iou(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.truncate(max_det);
    kept
}

/// Detections for one image after NMS.
pub fn predict(det: &Detector, store: &ParamStore, image: &Tensor, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let (_, h, w) = image.chw()?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = det.input(&mut g, image)?;
    let out = det.forward(&mut g, &bound, x)?;
    let anchors = det.config.anchors().anchors(h, w);
    let raw = decode_outputs(&g, &out, &anchors, (h, w), det.config.box_stds, cfg)?;
    Ok(nms(&raw, cfg.nms_iou, cfg.max_detections))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over IoU thresholds 0.5:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_vt: f64,
    pub ap_t: f64,
}

fn in_bucket(b: &BBox, bucket: Option<(f64, f64)>) -> bool {
    bucket.is_none_or(|(lo, hi)| b.scale() > lo && b.scale() <= hi)
}

/// Per-detection outcome of greedy matching for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Matched an out-of-bucket gt, or unmatched and itself out of bucket.
    Ignored,
}

/// Greedy matching of one image's detections (already in score order)
/// against its gts. Each detection takes the unmatched in-bucket gt of
/// highest IoU `>= thr` (lowest index on ties), falling back to
/// out-of-bucket gts, which make the detection ignored.
pub fn match_image(dets: &[Detection], gts: &[GtBox], thr: f64, bucket: Option<(f64, f64)>) -> Vec<MatchOutcome> {
    let ignored: Vec<bool> = gts.iter().map(|g| !in_bucket(&g.bbox, bucket)).collect();
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut pick = |want_ignored: bool| {
                let mut best: Option<(f64, usize)> = None;
                for (j, g) in gts.iter().enumerate() {
                    if taken[j] || ignored[j] != want_ignored {
                        continue;
                    }
                    let v = iou(&d.bbox, &g.bbox);
                    if v >= thr && best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, j));
                    }
                }
                best.map(|(_, j)| {
                    taken[j] = true;
                })
            };
            if pick(false).is_some() {
                MatchOutcome::TruePositive
            } else if pick(true).is_some() || !in_bucket(&d.bbox, bucket) {
                MatchOutcome::Ignored
            } else {
                MatchOutcome::FalsePositive
            }
        })
        .collect()
}

/// All-point interpolated AP for one class at one IoU threshold, or `None`
/// when the class has no in-bucket gt. Detections from all images are
/// ranked by score (ties keep image order) and precision/recall points are
/// taken only at the end of each group of equal scores.
pub fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    category: usize,
    thr: f64,
    bucket: Option<(f64, f64)>,
) -> Option<f64> {
    let mut ranked: Vec<(f64, MatchOutcome)> = Vec::new();
    let mut npos = 0;
    for (d, g) in dets.iter().zip(gts) {
        let mut di: Vec<Detection> = d.iter().filter(|x| x.category == category).copied().collect();
        di.sort_by(by_score);
        let gi: Vec<GtBox> = g.iter().filter(|x| x.category == category).copied().collect();
        npos += gi.iter().filter(|x| in_bucket(&x.bbox, bucket)).count();
        let m = match_image(&di, &gi, thr, bucket);
        ranked.extend(di.iter().map(|x| x.score).zip(m));
    }
    if npos == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, (score, m)) in ranked.iter().enumerate() {
        match m {
            MatchOutcome::TruePositive => tp += 1,
            MatchOutcome::FalsePositive => fp += 1,
            MatchOutcome::Ignored => {}
        }
        let group_end = ranked.get(i + 1).is_none_or(|n| n.0 != *score);
        if group_end && tp + fp > 0 {
            points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[i].0 - prev_recall) * envelope;
        prev_recall = points[i].0;
    }
    Some(ap)
}

/// Mean of [`class_ap`] over the classes that have in-bucket gts; 0 when none do.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], thr: f64, bucket: Option<(f64, f64)>) -> f64 {
    let num_classes = gts.iter().flatten().map(|g| g.category + 1).max().unwrap_or(0);
    let aps: Vec<f64> = (0..num_classes).filter_map(|c| class_ap(dets, gts, c, thr, bucket)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn mean_over(thrs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    thrs.iter().map(|&t| f(t)).sum::<f64>() / thrs.len() as f64
}

pub fn evaluate_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], cfg: &EvalConfig) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if cfg.iou_thresholds.is_empty() {
        return Err(Error::Invalid("no IoU thresholds".into()));
    }
    let thrs = &cfg.iou_thresholds;
    Ok(EvalResult {
        ap: mean_over(thrs, |t| mean_ap(dets, gts, t, None)),
        ap50: mean_ap(dets, gts, 0.5, None),
        ap75: mean_ap(dets, gts, 0.75, None),
        ap_vt: mean_over(thrs, |t| mean_ap(dets, gts, t, Some(cfg.very_tiny))),
        ap_t: mean_over(thrs, |t| mean_ap(dets, gts, t, Some(cfg.tiny))),
    })
}

/// Runs the detector over `scenes` and scores the detections.
pub fn evaluate_model(det: &Detector, store: &ParamStore, scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalResult> {
    let dets = scenes.iter().map(|s| predict(det, store, &s.image, cfg)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<GtBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    evaluate_ap(&dets, &gts, cfg)
}
