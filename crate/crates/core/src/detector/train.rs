use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{focal_loss, smooth_l1, LossNormalization, LossTargets};
use super::Model;
use crate::anchors::{self, AnchorEncoding};
use crate::autograd::{FocalParams, Graph};
use crate::error::{Error, Result};
use crate::matching::{assign_targets, DropBand, GroundTruthBox, MatchThresholds};
use crate::optim::Sgd;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Set by the caller; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Half-width of the uniform jitter applied to every encoding each step.
    pub augment_delta: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub normalization: LossNormalization,
    pub force_match: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            augment_delta: 0.5,
            warmup_steps: 100,
            clip_grad_norm: 10.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            normalization: LossNormalization::Positives,
            force_match: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub num_positive: usize,
    /// Ground truths in the batch whose loss was masked out.
    pub masked_gts: usize,
    pub lr: f64,
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub thresholds: MatchThresholds,
    pub drop_band: Option<DropBand>,
    anchors: Vec<AnchorEncoding>,
    sgd: Sgd,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// `anchors` are the training encodings. Baseline models always train on
    /// their own predefined anchors without jitter.
    pub fn new(
        model: Model,
        anchors: Vec<AnchorEncoding>,
        config: TrainConfig,
        thresholds: MatchThresholds,
        drop_band: Option<DropBand>,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("training needs at least one anchor"));
        }
        if let Some(fixed) = model.fixed_anchors() {
            if fixed != anchors.as_slice() {
                return Err(Error::invalid("baseline anchors differ from the training anchors"));
            }
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let sgd = Sgd::new(config.lr, config.momentum)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
        Ok(Trainer {
            model,
            config,
            thresholds,
            drop_band,
            anchors,
            sgd,
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Anchors for the next step; resampled once per batch.
    fn step_anchors(&mut self) -> Result<Vec<AnchorEncoding>> {
        if self.model.is_baseline() || self.config.augment_delta == 0.0 {
            return Ok(self.anchors.clone());
        }
        let delta = self.config.augment_delta;
        self.anchors
            .iter()
            .map(|e| anchors::augment(e, &mut self.rng, delta))
            .collect()
    }

    /// Loss graph for one batch. Returns the graph, the loss var and stats.
    pub fn batch_loss(
        &self,
        encodings: &[AnchorEncoding],
        batch: &[(&Tensor, &[GroundTruthBox])],
    ) -> Result<(Graph, crate::autograd::Var, StepStats)> {
        let model = &self.model;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, encodings)?;
        let fp = FocalParams {
            alpha: self.config.focal_alpha,
            gamma: self.config.focal_gamma,
        };
        let c = model.config.num_classes;
        let mut image_losses = Vec::with_capacity(batch.len());
        let mut stats = StepStats {
            step: self.step,
            loss: 0.0,
            cls_loss: 0.0,
            reg_loss: 0.0,
            num_positive: 0,
            masked_gts: 0,
            lr: self.sgd.lr,
        };
        for (image, gts) in batch {
            let outputs = model.forward_image(&mut g, &vars, image)?;
            let placed = outputs
                .iter()
                .map(|o| model.place_anchors(encodings, o.level, o.grid_h, o.grid_w))
                .collect::<Result<Vec<_>>>()?;
            let targets = assign_targets(&placed, gts, &self.thresholds, self.config.force_match)?;
            let masked: Vec<bool> = gts
                .iter()
                .map(|gt| self.drop_band.is_some_and(|b| b.contains(gt)))
                .collect();
            stats.masked_gts += masked.iter().filter(|m| **m).count();
            let level_targets: Vec<LossTargets> = outputs
                .iter()
                .zip(&targets.levels)
                .map(|(o, lt)| LossTargets::build(lt, encodings.len(), o.grid_h * o.grid_w, c, &masked))
                .collect();
            let normalizer = match self.config.normalization {
                LossNormalization::Positives => {
                    level_targets.iter().map(|t| t.num_positive).sum::<usize>().max(1) as f64
                }
                LossNormalization::NonIgnored => {
                    level_targets.iter().map(|t| t.num_counted).sum::<usize>().max(1) as f64
                }
            };
            stats.num_positive += level_targets.iter().map(|t| t.num_positive).sum::<usize>();
            let mut terms = Vec::new();
            for (o, t) in outputs.iter().zip(&level_targets) {
                let cls = focal_loss(&mut g, o.cls, t, fp, normalizer)?;
                let reg = smooth_l1(&mut g, o.reg, t, self.config.smooth_l1_beta, normalizer)?;
                stats.cls_loss += g.value(cls).item();
                stats.reg_loss += g.value(reg).item();
                terms.push(cls);
                terms.push(reg);
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t)?;
            }
            image_losses.push(total);
        }
        let mut loss = image_losses[0];
        for &l in &image_losses[1..] {
            loss = g.add(loss, l)?;
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = g.scale(loss, inv);
        stats.cls_loss *= inv;
        stats.reg_loss *= inv;
        stats.loss = g.value(loss).item();
        Ok((g, loss, stats))
    }

    /// One optimization step on a batch of `(image, ground truths)` pairs.
    pub fn step(&mut self, batch: &[(&Tensor, &[GroundTruthBox])]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let warm = self.config.warmup_steps;
        self.sgd.lr = if warm > 0 && self.step < warm {
            self.config.lr * (self.step + 1) as f64 / warm as f64
        } else {
            self.config.lr
        };
        let encodings = self.step_anchors()?;
        let (g, loss, stats) = self.batch_loss(&encodings, batch)?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} (cls {}, reg {}, {} positives)",
                self.step, stats.cls_loss, stats.reg_loss, stats.num_positive
            )));
        }
        self.model.params.zero_grad();
        g.backward(loss, &mut self.model.params)?;
        if self.config.clip_grad_norm > 0.0 {
            clip_grad_norm(&mut self.model.params, self.config.clip_grad_norm);
        }
        self.sgd.step(&mut self.model.params)?;
        self.step += 1;
        Ok(stats)
    }

    /// Runs `steps` steps over shuffled epochs of `data`, calling `on_step`
    /// after each one.
    pub fn fit(
        &mut self,
        data: &[(Tensor, Vec<GroundTruthBox>)],
        steps: usize,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let bs = self.config.batch_size.min(data.len());
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len();
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            if cursor + bs > data.len() {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let batch: Vec<(&Tensor, &[GroundTruthBox])> = order[cursor..cursor + bs]
                .iter()
                .map(|&i| (&data[i].0, data[i].1.as_slice()))
                .collect();
            cursor += bs;
            let s = self.step(&batch)?;
            on_step(&s);
            log.push(s);
        }
        Ok(log)
    }
}

fn clip_grad_norm(store: &mut crate::tensor::ParamStore, max_norm: f64) {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}
