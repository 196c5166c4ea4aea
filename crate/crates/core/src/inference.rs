//! Prediction with an arbitrary anchor list, non-maximum suppression and the
//! greedy anchor-subset search.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorBox, AnchorEncoding, StandardBox};
use crate::autograd::Graph;
use crate::detector::Model;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::kernels::sigmoid;
use crate::matching::{decode_reg, BBox, GroundTruthBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[x0, y0, x1, y1]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub source_anchor: AnchorEncoding,
    pub level: usize,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        let [x0, y0, x1, y1] = self.bbox;
        BBox::from_corners(x0, y0, x1, y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictOptions {
    pub score_thresh: f64,
    /// Top-scoring raw candidates kept per image before NMS.
    pub max_candidates: Option<usize>,
    pub nms_iou: f64,
    pub class_aware_nms: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            score_thresh: 0.05,
            max_candidates: None,
            nms_iou: 0.5,
            class_aware_nms: true,
        }
    }
}

/// Raw detections tagged with the index of their anchor in `anchors`.
fn raw_detections(
    model: &Model,
    image: &Tensor,
    anchors: &[AnchorEncoding],
    score_thresh: f64,
) -> Result<Vec<(usize, Detection)>> {
    if anchors.is_empty() {
        return Err(Error::invalid("anchor list is empty"));
    }
    // baseline heads run on their full fixed set; keep the requested subset
    let (run, keep): (Vec<AnchorEncoding>, Vec<Option<usize>>) = match model.fixed_anchors() {
        Some(fixed) => {
            let mut keep = vec![None; fixed.len()];
            for (i, a) in anchors.iter().enumerate() {
                let j = fixed.iter().position(|f| f == a).ok_or_else(|| {
                    Error::invalid(format!(
                        "anchor ({}, {}) is not one of the baseline's predefined anchors",
                        a.eh, a.ew
                    ))
                })?;
                keep[j] = Some(i);
            }
            (fixed.to_vec(), keep)
        }
        None => (anchors.to_vec(), (0..anchors.len()).map(Some).collect()),
    };
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, &run)?;
    let levels = model.forward_image(&mut g, &vars, image)?;
    let c = model.config.num_classes;
    let mut out = Vec::new();
    for lo in &levels {
        let placed = model.place_anchors(&run, lo.level, lo.grid_h, lo.grid_w)?;
        let hw = lo.grid_h * lo.grid_w;
        let cls = g.value(lo.cls).data();
        let reg = g.value(lo.reg).data();
        for (a, k) in keep.iter().enumerate() {
            let Some(idx) = *k else { continue };
            for class_id in 0..c {
                for pos in 0..hw {
                    let score = sigmoid(cls[(a * c + class_id) * hw + pos]);
                    if score <= score_thresh {
                        continue;
                    }
                    let (y, x) = (pos / lo.grid_w, pos % lo.grid_w);
                    let d = [0, 1, 2, 3].map(|j| reg[(a * 4 + j) * hw + pos]);
                    let b = decode_reg(&placed.anchor_at(a, y, x), &d)?;
                    out.push((
                        idx,
                        Detection {
                            bbox: b.corners(),
                            score,
                            class_id,
                            source_anchor: anchors[idx],
                            level: lo.level,
                        },
                    ));
                }
            }
        }
    }
    Ok(out)
}

fn top_k(dets: &mut Vec<Detection>, k: Option<usize>) {
    if let Some(k) = k {
        if dets.len() > k {
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(k);
        }
    }
}

/// Decoded detections of every anchor scoring above the threshold, before NMS.
/// Baseline models accept only anchors from their predefined set.
pub fn predict(model: &Model, image: &Tensor, anchors: &[AnchorEncoding], opts: &PredictOptions) -> Result<Vec<Detection>> {
    let mut dets: Vec<Detection> = raw_detections(model, image, anchors, opts.score_thresh)?
        .into_iter()
        .map(|(_, d)| d)
        .collect();
    top_k(&mut dets, opts.max_candidates);
    Ok(dets)
}

/// [`predict`] followed by [`nms`].
pub fn detect(model: &Model, image: &Tensor, anchors: &[AnchorEncoding], opts: &PredictOptions) -> Result<Vec<Detection>> {
    let dets = predict(model, image, anchors, opts)?;
    Ok(nms(&dets, opts.nms_iou, opts.class_aware_nms))
}

/// Order used by NMS: score descending, then left edge ascending, then input order.
fn nms_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then(dets[i].bbox[0].total_cmp(&dets[j].bbox[0]))
    });
    idx
}

/// Greedy suppression of boxes overlapping a kept box by more than `iou`.
/// Class-aware runs only suppress within a class.
pub fn nms(dets: &[Detection], iou: f64, class_aware: bool) -> Vec<Detection> {
    let order = nms_order(dets);
    let boxes: Vec<BBox> = dets.iter().map(Detection::bbox).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| (!class_aware || dets[k].class_id == dets[i].class_id) && boxes[k].iou(&boxes[i]) > iou);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Scales `2^(k/5)` for `k` in the range, ratios `{1/3, 3}` together with
/// `{1/t, 1, t}` for `t = 1.1, 1.2, ..., 2.0`.
pub fn search_pool(base_size: f64, standard: &StandardBox, k_range: RangeInclusive<i32>) -> Result<Vec<AnchorEncoding>> {
    let mut ratios = vec![1.0 / 3.0, 3.0, 1.0];
    for i in 11..=20 {
        let t = i as f64 / 10.0;
        ratios.push(t);
        ratios.push(1.0 / t);
    }
    ratios.sort_by(f64::total_cmp);
    ratios.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut out = Vec::new();
    for k in k_range {
        let s = 2f64.powf(k as f64 / 5.0);
        for &r in &ratios {
            let b = AnchorBox::new(base_size * s * r.sqrt(), base_size * s / r.sqrt())?;
            out.push(anchors::encode(&b, standard)?);
        }
    }
    Ok(out)
}

pub const DEFAULT_POOL_K: RangeInclusive<i32> = -1..=5;

/// [`search_pool`] over the default scale range (7 scales, 23 ratios).
pub fn default_search_pool(base_size: f64, standard: &StandardBox) -> Result<Vec<AnchorEncoding>> {
    search_pool(base_size, standard, DEFAULT_POOL_K)
}

/// Scores a subset of candidate indices, e.g. by mmAP on held-out images.
pub trait CandidateEvaluator {
    fn evaluate(&mut self, selected: &[usize]) -> Result<f64>;
}

impl<F: FnMut(&[usize]) -> Result<f64>> CandidateEvaluator for F {
    fn evaluate(&mut self, selected: &[usize]) -> Result<f64> {
        self(selected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchStep {
    pub candidate: usize,
    /// Score of the current set plus `candidate`.
    pub score: f64,
    pub accepted: bool,
    /// Score of the selected set after this step.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    /// Candidate indices in the order they were accepted.
    pub selected: Vec<usize>,
    pub initial_score: f64,
    pub score: f64,
    pub trace: Vec<SearchStep>,
}

/// Visits candidates in `order`; a candidate is kept when it strictly raises
/// the score of the selected set.
pub fn greedy_search_in_order(order: &[usize], eval: &mut dyn CandidateEvaluator) -> Result<SearchResult> {
    let initial = eval.evaluate(&[])?;
    let mut selected = Vec::new();
    let mut best = initial;
    let mut trace = Vec::with_capacity(order.len());
    for &cand in order {
        let mut trial = selected.clone();
        trial.push(cand);
        let score = eval.evaluate(&trial)?;
        let accepted = score > best;
        if accepted {
            selected = trial;
            best = score;
        }
        log::debug!("search: candidate {cand} score {score:.5} accepted {accepted}");
        trace.push(SearchStep {
            candidate: cand,
            score,
            accepted,
            best,
        });
    }
    Ok(SearchResult {
        selected,
        initial_score: initial,
        score: best,
        trace,
    })
}

/// Greedy search over `0..num_candidates` visited in a seeded random order,
/// without replacement. `max_steps` defaults to one pass over the pool.
pub fn greedy_search(
    num_candidates: usize,
    eval: &mut dyn CandidateEvaluator,
    seed: u64,
    max_steps: Option<usize>,
) -> Result<SearchResult> {
    if num_candidates == 0 {
        return Err(Error::invalid("empty candidate pool"));
    }
    let mut order: Vec<usize> = (0..num_candidates).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(max_steps.unwrap_or(num_candidates));
    greedy_search_in_order(&order, eval)
}

/// Scores candidate subsets by mmAP of a model on a fixed image set. Each
/// candidate's raw detections are computed once up front.
pub struct DetectionEvaluator {
    /// `raw[image][candidate]`
    raw: Vec<Vec<Vec<Detection>>>,
    gts: Vec<Vec<GroundTruthBox>>,
    num_classes: usize,
    opts: PredictOptions,
}

impl DetectionEvaluator {
    pub fn new(
        model: &Model,
        candidates: &[AnchorEncoding],
        data: &[(Tensor, Vec<GroundTruthBox>)],
        opts: PredictOptions,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("empty search set"));
        }
        let mut raw = Vec::with_capacity(data.len());
        for (image, _) in data {
            let mut per: Vec<Vec<Detection>> = vec![Vec::new(); candidates.len()];
            for (i, d) in raw_detections(model, image, candidates, opts.score_thresh)? {
                per[i].push(d);
            }
            raw.push(per);
        }
        Ok(DetectionEvaluator {
            raw,
            gts: data.iter().map(|(_, g)| g.clone()).collect(),
            num_classes: model.config.num_classes,
            opts,
        })
    }

    /// Final detections of every image for a candidate subset.
    pub fn detections(&self, selected: &[usize]) -> Vec<Vec<Detection>> {
        self.raw
            .iter()
            .map(|per| {
                let mut d: Vec<Detection> = selected.iter().flat_map(|&i| per[i].iter().copied()).collect();
                top_k(&mut d, self.opts.max_candidates);
                nms(&d, self.opts.nms_iou, self.opts.class_aware_nms)
            })
            .collect()
    }
}

impl CandidateEvaluator for DetectionEvaluator {
    fn evaluate(&mut self, selected: &[usize]) -> Result<f64> {
        let dets = self.detections(selected);
        Ok(evaluation::mmap(&dets, &self.gts, self.num_classes)?.mmap)
    }
}
