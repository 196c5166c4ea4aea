use serde::{Deserialize, Serialize};

use crate::autograd::{FocalParams, Graph, Var};
use crate::error::Result;
use crate::matching::{AnchorLabel, LevelTargets};

/// Divisor applied to the summed per-anchor losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossNormalization {
    /// Number of (unmasked) positive anchors, at least 1.
    #[default]
    Positives,
    /// Number of anchors that take part in the classification loss.
    NonIgnored,
}

/// Dense per-element targets of one level, laid out like the head outputs:
/// classification `(a * C + c) * HW + pos`, regression `(a * 4 + k) * HW + pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub cls_targets: Vec<f64>,
    pub cls_weights: Vec<f64>,
    pub reg_targets: Vec<f64>,
    pub reg_weights: Vec<f64>,
    pub num_positive: usize,
    pub num_counted: usize,
    /// Positive anchors whose ground truth is masked out.
    pub num_masked: usize,
}

impl LossTargets {
    /// `masked[g]` zeroes every contribution of anchors matched to GT `g`;
    /// such anchors are neither positives nor negatives.
    pub fn build(lt: &LevelTargets, num_anchors: usize, hw: usize, num_classes: usize, masked: &[bool]) -> Self {
        let c = num_classes;
        let mut t = LossTargets {
            cls_targets: vec![0.0; num_anchors * c * hw],
            cls_weights: vec![0.0; num_anchors * c * hw],
            reg_targets: vec![0.0; num_anchors * 4 * hw],
            reg_weights: vec![0.0; num_anchors * 4 * hw],
            num_positive: 0,
            num_counted: 0,
            num_masked: 0,
        };
        for (i, label) in lt.labels.iter().enumerate() {
            let (a, pos) = (i / hw, i % hw);
            match *label {
                AnchorLabel::Ignored => {}
                AnchorLabel::Positive { gt_index, .. } if masked.get(gt_index).copied().unwrap_or(false) => {
                    t.num_masked += 1;
                }
                AnchorLabel::Negative => {
                    t.num_counted += 1;
                    for k in 0..c {
                        t.cls_weights[(a * c + k) * hw + pos] = 1.0;
                    }
                }
                AnchorLabel::Positive { class_id, .. } => {
                    t.num_counted += 1;
                    t.num_positive += 1;
                    for k in 0..c {
                        let j = (a * c + k) * hw + pos;
                        t.cls_weights[j] = 1.0;
                        t.cls_targets[j] = if k == class_id { 1.0 } else { 0.0 };
                    }
                    let r = lt.reg_targets[i].expect("positives carry regression targets");
                    for (k, v) in r.iter().enumerate() {
                        let j = (a * 4 + k) * hw + pos;
                        t.reg_weights[j] = 1.0;
                        t.reg_targets[j] = *v;
                    }
                }
            }
        }
        t
    }
}

/// Alpha-balanced sigmoid focal loss over the weighted entries, summed and
/// divided by `normalizer`. With no weighted entries the loss is 0.
pub fn focal_loss(g: &mut Graph, logits: Var, t: &LossTargets, fp: FocalParams, normalizer: f64) -> Result<Var> {
    if t.num_counted == 0 {
        log::warn!("focal loss over an empty anchor set");
    }
    g.focal_loss(logits, &t.cls_targets, &t.cls_weights, fp, normalizer.max(1e-12))
}

/// Smooth-L1 over positive anchors, summed over the four deltas and divided
/// by `normalizer`.
pub fn smooth_l1(g: &mut Graph, pred: Var, t: &LossTargets, beta: f64, normalizer: f64) -> Result<Var> {
    g.smooth_l1_loss(pred, &t.reg_targets, &t.reg_weights, beta, normalizer.max(1e-12))
}
