//! COCO-style average precision: greedy score-ordered matching and
//! 101-point interpolated precision over recall.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::Detection;
use crate::matching::{BBox, GroundTruthBox};

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 101;

/// AP of one class over a set of images. `dets[i]` are `(box, score)` pairs
/// of image `i`, `gts[i]` its ground truths. `None` when there is no ground
/// truth at all.
pub fn average_precision(dets: &[Vec<(BBox, f64)>], gts: &[Vec<BBox>], iou_thresh: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    // (score, image, index); stable sort keeps image/index order on ties
    let mut order: Vec<(f64, usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(im, d)| d.iter().enumerate().map(move |(k, (_, s))| (*s, im, k)))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for &(_, im, k) in &order {
        let b = &dets[im][k].0;
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.get(im).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            if matched[im][j] {
                continue;
            }
            let v = b.iou(g);
            if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        match best {
            Some((_, j)) => {
                matched[im][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let rt = r as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < rt);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// One entry per IoU threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub iou_thresholds: Vec<f64>,
    /// Classes with at least one ground truth.
    pub per_class: Vec<ClassAp>,
    pub mmap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl EvalResult {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>6}", "class");
        for t in &self.iou_thresholds {
            let _ = write!(s, " {:>6.2}", t);
        }
        let _ = writeln!(s, " {:>6}", "mean");
        for c in &self.per_class {
            let _ = write!(s, "{:>6}", c.class_id);
            for v in &c.ap {
                let _ = write!(s, " {:>6.4}", v);
            }
            let _ = writeln!(s, " {:>6.4}", c.ap.iter().sum::<f64>() / c.ap.len() as f64);
        }
        let _ = writeln!(s, "mmAP {:.4}  AP50 {:.4}  AP75 {:.4}", self.mmap, self.ap50, self.ap75);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Keep only the top-scoring detections of each image.
    pub max_dets: Option<usize>,
}

/// AP per class and IoU threshold; means over both for mmAP, over classes
/// at 0.50 / 0.75 for AP50 / AP75.
pub fn mmap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], num_classes: usize) -> Result<EvalResult> {
    mmap_with(dets, gts, num_classes, EvalOptions::default())
}

pub fn mmap_with(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    opts: EvalOptions,
) -> Result<EvalResult> {
    if gts.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let thresholds = coco_thresholds();
    let capped: Vec<Vec<&Detection>> = dets
        .iter()
        .map(|d| {
            let mut v: Vec<&Detection> = d.iter().collect();
            if let Some(k) = opts.max_dets {
                v.sort_by(|a, b| b.score.total_cmp(&a.score));
                v.truncate(k);
            }
            v
        })
        .collect();
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let g: Vec<Vec<BBox>> = gts
            .iter()
            .map(|im| im.iter().filter(|b| b.class_id == c).map(GroundTruthBox::bbox).collect())
            .collect();
        if g.iter().all(Vec::is_empty) {
            continue;
        }
        let d: Vec<Vec<(BBox, f64)>> = capped
            .iter()
            .map(|im| {
                im.iter()
                    .filter(|x| x.class_id == c)
                    .map(|x| (x.bbox(), x.score))
                    .collect()
            })
            .collect();
        let ap = thresholds
            .iter()
            .map(|&t| average_precision(&d, &g, t).expect("class has ground truths"))
            .collect();
        per_class.push(ClassAp { class_id: c, ap });
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no ground truths in evaluation set"));
    }
    let n = per_class.len() as f64;
    let mean_at = |i: usize| per_class.iter().map(|c| c.ap[i]).sum::<f64>() / n;
    let mmap = per_class.iter().map(|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64).sum::<f64>() / n;
    Ok(EvalResult {
        ap50: mean_at(0),
        ap75: mean_at(5),
        mmap,
        iou_thresholds: thresholds,
        per_class,
    })
}
