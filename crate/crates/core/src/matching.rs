//! Box geometry, anchor/ground-truth assignment and the regression
//! parameterization.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorBox;
use crate::error::{Error, Result};

/// Largest exponent applied when decoding width/height deltas.
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137; // ln(1000)

/// Axis-aligned box in center-size form (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `[x0, y0, x1, y1]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }

    /// Intersection over union; 0 when either box is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.corners();
        let [bx0, by0, bx1, by1] = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 || inter <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// IoU of two boxes with positive area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::invalid(format!("degenerate box {bx:?}")));
        }
    }
    Ok(a.iou(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn bbox(&self) -> BBox {
        BBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize) -> Self {
        let b = BBox::from_corners(x0, y0, x1, y1);
        GroundTruthBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub t_pos: f64,
    pub t_neg: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds { t_pos: 0.5, t_neg: 0.4 }
    }
}

impl MatchThresholds {
    /// `t_neg == t_pos` is accepted and leaves no ignored band.
    pub fn new(t_pos: f64, t_neg: f64) -> Result<Self> {
        if !(t_pos > 0.0 && t_pos <= 1.0 && t_neg >= 0.0 && t_neg <= t_pos) {
            return Err(Error::invalid(format!(
                "IoU thresholds need 0 <= t_neg <= t_pos <= 1 and t_pos > 0, got {t_pos}/{t_neg}"
            )));
        }
        Ok(MatchThresholds { t_pos, t_neg })
    }
}

/// Anchors of one pyramid level, replicated at every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub level: usize,
    pub stride: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub boxes: Vec<AnchorBox>,
}

impl LevelAnchors {
    pub fn len(&self) -> usize {
        self.boxes.len() * self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index, anchor-major: `(a * grid_h + y) * grid_w + x`.
    pub fn index(&self, a: usize, y: usize, x: usize) -> usize {
        (a * self.grid_h + y) * self.grid_w + x
    }

    /// Cell centers sit at `stride * (i + 0.5)`.
    pub fn anchor_at(&self, a: usize, y: usize, x: usize) -> BBox {
        BBox {
            cx: self.stride * (x as f64 + 0.5),
            cy: self.stride * (y as f64 + 0.5),
            w: self.boxes[a].w,
            h: self.boxes[a].h,
        }
    }

    pub fn anchor_by_index(&self, i: usize) -> BBox {
        let hw = self.grid_h * self.grid_w;
        let a = i / hw;
        let r = i % hw;
        self.anchor_at(a, r / self.grid_w, r % self.grid_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { class_id: usize, gt_index: usize },
    Negative,
    Ignored,
}

/// Assignment for every placed anchor, one entry per level.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub levels: Vec<LevelTargets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub level: usize,
    pub labels: Vec<AnchorLabel>,
    /// Present exactly for positive anchors.
    pub reg_targets: Vec<Option<[f64; 4]>>,
}

impl TargetMap {
    pub fn count(&self, pred: impl Fn(&AnchorLabel) -> bool) -> usize {
        self.levels
            .iter()
            .map(|l| l.labels.iter().filter(|x| pred(x)).count())
            .sum()
    }

    pub fn num_positive(&self) -> usize {
        self.count(|l| matches!(l, AnchorLabel::Positive { .. }))
    }
}

/// Labels every anchor against the ground truths: positive to its best GT at
/// IoU >= `t_pos`, negative below `t_neg`, ignored in between. With
/// `force_match`, each GT's single best anchor (first in level/index order on
/// ties) is made positive for it regardless of threshold.
pub fn assign_targets(
    anchors: &[LevelAnchors],
    gts: &[GroundTruthBox],
    th: &MatchThresholds,
    force_match: bool,
) -> Result<TargetMap> {
    if anchors.iter().all(LevelAnchors::is_empty) {
        return Err(Error::invalid("empty anchor grid"));
    }
    let gt_boxes: Vec<BBox> = gts.iter().map(GroundTruthBox::bbox).collect();
    // best (iou, level, index) per GT
    let mut best_for_gt: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0); gts.len()];
    let mut levels = Vec::with_capacity(anchors.len());
    for (li, la) in anchors.iter().enumerate() {
        let n = la.len();
        let mut per_anchor = vec![(0.0, usize::MAX); n];
        for (i, slot) in per_anchor.iter_mut().enumerate() {
            let ab = la.anchor_by_index(i);
            for (g, gb) in gt_boxes.iter().enumerate() {
                let v = ab.iou(gb);
                if v > slot.0 || slot.1 == usize::MAX {
                    *slot = (v, g);
                }
                if v > best_for_gt[g].0 {
                    best_for_gt[g] = (v, li, i);
                }
            }
        }
        let labels = per_anchor
            .iter()
            .map(|&(v, g)| {
                if g == usize::MAX || v < th.t_neg {
                    AnchorLabel::Negative
                } else if v >= th.t_pos {
                    AnchorLabel::Positive {
                        class_id: gts[g].class_id,
                        gt_index: g,
                    }
                } else {
                    AnchorLabel::Ignored
                }
            })
            .collect();
        levels.push(LevelTargets {
            level: la.level,
            labels,
            reg_targets: vec![None; n],
        });
    }
    if force_match {
        for (g, &(v, li, i)) in best_for_gt.iter().enumerate() {
            if v > 0.0 {
                levels[li].labels[i] = AnchorLabel::Positive {
                    class_id: gts[g].class_id,
                    gt_index: g,
                };
            }
        }
    }
    for (li, lt) in levels.iter_mut().enumerate() {
        for i in 0..lt.labels.len() {
            if let AnchorLabel::Positive { gt_index, .. } = lt.labels[i] {
                let ab = anchors[li].anchor_by_index(i);
                lt.reg_targets[i] = Some(encode_reg(&ab, &gts[gt_index])?);
            }
        }
    }
    Ok(TargetMap { levels })
}

/// `((gx - ax) / aw, (gy - ay) / ah, ln(gw / aw), ln(gh / ah))`.
pub fn encode_reg(anchor: &BBox, gt: &GroundTruthBox) -> Result<[f64; 4]> {
    if !(anchor.w > 0.0 && anchor.h > 0.0 && gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::invalid(format!(
            "regression encoding needs positive sizes: anchor {}x{}, gt {}x{}",
            anchor.w, anchor.h, gt.w, gt.h
        )));
    }
    Ok([
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

/// Inverse of [`encode_reg`]; the size deltas are clamped at `ln(1000)`.
pub fn decode_reg(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("regression deltas {deltas:?}")));
    }
    Ok(BBox {
        cx: anchor.cx + deltas[0] * anchor.w,
        cy: anchor.cy + deltas[1] * anchor.h,
        w: anchor.w * deltas[2].min(MAX_LOG_SCALE).exp(),
        h: anchor.h * deltas[3].min(MAX_LOG_SCALE).exp(),
    })
}

/// Size/aspect band of ground truths whose loss is zeroed during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropBand {
    pub min_sqrt_hw: f64,
    pub max_sqrt_hw: f64,
    pub log_ratio_bound: f64,
}

impl Default for DropBand {
    fn default() -> Self {
        DropBand {
            min_sqrt_hw: 50.0,
            max_sqrt_hw: 100.0,
            log_ratio_bound: 1.0,
        }
    }
}

impl DropBand {
    /// Strict inequalities on both conditions.
    pub fn contains(&self, gt: &GroundTruthBox) -> bool {
        let s = (gt.h * gt.w).sqrt();
        let r = (gt.w / gt.h).ln();
        self.min_sqrt_hw < s && s < self.max_sqrt_hw && -self.log_ratio_bound < r && r < self.log_ratio_bound
    }
}

/// Membership in the default band `50 < sqrt(hw) < 100, -1 < ln(w/h) < 1`.
pub fn drop_mask(gt: &GroundTruthBox) -> bool {
    DropBand::default().contains(gt)
}
