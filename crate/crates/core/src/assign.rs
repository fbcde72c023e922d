//! Anchors, IoU, max-IoU label assignment, box-delta coding and per-level
//! positive/negative statistics.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::Level;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Side length of the equal-area square, used for size buckets.
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Scales all coordinates about the origin.
    pub fn scaled(&self, f: f64) -> BBox {
        BBox { x1: self.x1 * f, y1: self.y1 * f, x2: self.x2 * f, y2: self.y2 * f }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// One square anchor of side `base_size * stride` per cell, centred at
/// `((x + 0.5) * stride, (y + 0.5) * stride)`, row-major.
pub fn gen_anchors(stride: usize, h: usize, w: usize, base_size: f64) -> Vec<BBox> {
    let s = stride as f64;
    let half = base_size * s * 0.5;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * s;
            let cy = (y as f64 + 0.5) * s;
            out.push(BBox { x1: cx - half, y1: cy - half, x2: cx + half, y2: cy + half });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub base_size: f64,
    pub levels: Vec<Level>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { base_size: 2.0, levels: Level::ALL.to_vec() }
    }
}

/// Anchors of several levels concatenated in level order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    /// Level, index range into `boxes`, feature-map size.
    pub spans: Vec<(Level, Range<usize>, (usize, usize))>,
}

impl AnchorConfig {
    pub fn anchors(&self, image_h: usize, image_w: usize) -> AnchorSet {
        let mut boxes = Vec::new();
        let mut spans = Vec::new();
        for &l in &self.levels {
            let (h, w) = l.dims_for(image_h, image_w);
            let start = boxes.len();
            boxes.extend(gen_anchors(l.stride(), h, w, self.base_size));
            spans.push((l, start..boxes.len(), (h, w)));
        }
        AnchorSet { boxes, spans }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Index of the matched ground truth.
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub pos_thr: f64,
    pub neg_thr: f64,
    pub force_best_match: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { pos_thr: 0.5, neg_thr: 0.4, force_best_match: true }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_thr && self.neg_thr <= self.pos_thr && self.pos_thr <= 1.0) {
            return Err(Error::Invalid(format!(
                "thresholds need 0 <= neg_thr <= pos_thr <= 1, got {} / {}",
                self.neg_thr, self.pos_thr
            )));
        }
        Ok(())
    }
}

/// A label-assignment strategy.
pub trait Assigner {
    fn assign(&self, anchors: &[BBox], gts: &[BBox]) -> Result<Vec<Label>>;
}

impl Assigner for AssignConfig {
    fn assign(&self, anchors: &[BBox], gts: &[BBox]) -> Result<Vec<Label>> {
        assign_maxiou(anchors, gts, self)
    }
}

/// Max-IoU assignment.
///
/// An anchor whose best IoU is `>= pos_thr` is positive for that gt (lowest
/// gt index on ties), `< neg_thr` is negative, anything between is ignored.
/// With `force_best_match`, each gt in order then claims its highest-IoU
/// anchor (lowest anchor index on ties) if that IoU is positive; a later gt
/// overrides an earlier one on the same anchor.
pub fn assign_maxiou(anchors: &[BBox], gts: &[BBox], cfg: &AssignConfig) -> Result<Vec<Label>> {
    cfg.validate()?;
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0.0f64, usize::MAX);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.0 || best.1 == usize::MAX {
                best = (v, gi);
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, ai);
            }
        }
        labels.push(if best.1 != usize::MAX && best.0 >= cfg.pos_thr {
            Label::Positive(best.1)
        } else if best.0 < cfg.neg_thr {
            Label::Negative
        } else {
            Label::Ignored
        });
    }
    if cfg.force_best_match {
        for (gi, &(v, ai)) in best_for_gt.iter().enumerate() {
            if v > 0.0 {
                labels[ai] = Label::Positive(gi);
            }
        }
    }
    Ok(labels)
}

/// Regression target `(dx, dy, dw, dh)` of `gt` relative to `anchor`.
pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(gx - ax) / aw, (gy - ay) / ah, (gt.width() / aw).ln(), (gt.height() / ah).ln()]
}

/// Largest `dw`/`dh` applied when decoding; keeps `exp` finite.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn decode_deltas(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: Level,
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
}

impl LevelStats {
    pub fn total(&self) -> usize {
        self.positives + self.negatives + self.ignored
    }
}

/// Ground-truth boxes of one image together with its size.
#[derive(Debug, Clone, PartialEq)]
pub struct GtImage {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

/// Aggregates assignment labels per pyramid level over all images. All
/// levels of an image are assigned jointly, so the forced best match of a
/// gt is the best anchor across the whole pyramid.
pub fn level_stats(images: &[GtImage], anchors: &AnchorConfig, assigner: &dyn Assigner) -> Result<Vec<LevelStats>> {
    let mut stats: Vec<LevelStats> = anchors
        .levels
        .iter()
        .map(|&level| LevelStats { level, positives: 0, negatives: 0, ignored: 0 })
        .collect();
    for img in images {
        let set = anchors.anchors(img.height, img.width);
        let labels = assigner.assign(&set.boxes, &img.boxes)?;
        for (s, (_, range, _)) in stats.iter_mut().zip(&set.spans) {
            for l in &labels[range.clone()] {
                match l {
                    Label::Positive(_) => s.positives += 1,
                    Label::Negative => s.negatives += 1,
                    Label::Ignored => s.ignored += 1,
                }
            }
        }
    }
    Ok(stats)
}

pub fn stats_csv(stats: &[LevelStats]) -> String {
    let mut s = String::from("level,positives,negatives,ignored\n");
    for l in stats {
        let _ = writeln!(s, "{},{},{},{}", l.level, l.positives, l.negatives, l.ignored);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn anchor_layout() {
        let a = gen_anchors(4, 2, 3, 2.0);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], b(-2.0, -2.0, 6.0, 6.0));
        assert_eq!(gen_anchors(64, 1, 1, 2.0)[0].width(), 128.0);
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(4.0, 0.0, 8.0, 4.0)), 0.0);
        assert_eq!(iou(&b(0.0, 0.0, 128.0, 128.0), &b(10.0, 10.0, 18.0, 18.0)), 0.003_906_25);
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn no_gts_all_negative() {
        let a = gen_anchors(4, 4, 4, 2.0);
        let l = assign_maxiou(&a, &[], &AssignConfig::default()).unwrap();
        assert!(l.iter().all(|x| *x == Label::Negative));
    }

    #[test]
    fn coincident_gt() {
        let a = gen_anchors(4, 4, 4, 2.0);
        let l = assign_maxiou(&a, &[a[5]], &AssignConfig::default()).unwrap();
        let pos: Vec<_> = l.iter().enumerate().filter(|(_, x)| matches!(x, Label::Positive(_))).collect();
        assert_eq!(pos, vec![(5, &Label::Positive(0))]);
    }

    #[test]
    fn bad_thresholds() {
        let cfg = AssignConfig { pos_thr: 0.3, neg_thr: 0.4, ..Default::default() };
        assert!(assign_maxiou(&[], &[], &cfg).is_err());
    }

    #[test]
    fn delta_round_trip() {
        let a = b(-2.0, -2.0, 6.0, 6.0);
        let g = b(1.0, 0.5, 7.0, 4.0);
        let back = decode_deltas(&a, encode_deltas(&a, &g));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_stats() {
        let s = level_stats(&[], &AnchorConfig::default(), &AssignConfig::default()).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|l| l.total() == 0));
        assert!(stats_csv(&s).starts_with("level,positives,negatives,ignored\nP2,0,0,0\n"));
    }

    #[test]
    fn stats_conserve_anchor_count() {
        let img = GtImage { height: 128, width: 128, boxes: vec![b(10.0, 10.0, 20.0, 18.0), b(60.0, 70.0, 66.0, 75.0)] };
        let s = level_stats(&[img], &AnchorConfig::default(), &AssignConfig::default()).unwrap();
        let total: usize = s.iter().map(LevelStats::total).sum();
        assert_eq!(total, 32 * 32 + 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2);
    }
}
