//! Experiment configuration files and the train/evaluate glue shared by the
//! command-line tool and the end-to-end tests.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorEncoding, AnchorConfiguration, StandardBox};
use crate::data::Sample;
use crate::detector::{HeadMode, Model, ModelConfig, StepStats, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalResult};
use crate::generator::GeneratorVariant;
use crate::inference::{self, PredictOptions};
use crate::matching::{DropBand, GroundTruthBox, MatchThresholds};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    pub n_scales: usize,
    /// Height over width.
    pub ratios: Vec<f64>,
    /// Anchor size at scale 1 on the finest level, in pixels.
    pub base_size: f64,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection {
            n_scales: 3,
            ratios: vec![0.5, 1.0, 2.0],
            base_size: 8.0,
        }
    }
}

impl AnchorSection {
    pub fn configuration(&self) -> Result<AnchorConfiguration> {
        anchors::build_configuration(self.n_scales, &self.ratios, self.base_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub variant: GeneratorVariant,
    /// Hidden width of the generator.
    pub m: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            variant: GeneratorVariant::DataIndependent,
            m: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feat_channels: usize,
    pub stem_channels: usize,
    pub num_levels: usize,
    pub tower_depth: usize,
    /// Learned per-anchor filters instead of generated ones.
    pub baseline: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feat_channels: 16,
            stem_channels: 8,
            num_levels: 3,
            tower_depth: 1,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropSection {
    pub enabled: bool,
    pub min_sqrt_hw: f64,
    pub max_sqrt_hw: f64,
    pub log_ratio_bound: f64,
}

impl Default for DropSection {
    fn default() -> Self {
        let b = DropBand::default();
        DropSection {
            enabled: false,
            min_sqrt_hw: b.min_sqrt_hw,
            max_sqrt_hw: b.max_sqrt_hw,
            log_ratio_bound: b.log_ratio_bound,
        }
    }
}

impl DropSection {
    pub fn band(&self) -> Option<DropBand> {
        self.enabled.then_some(DropBand {
            min_sqrt_hw: self.min_sqrt_hw,
            max_sqrt_hw: self.max_sqrt_hw,
            log_ratio_bound: self.log_ratio_bound,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    /// Pool scales are `2^(k/5)` for `k_min <= k <= k_max`.
    pub k_min: i32,
    pub k_max: i32,
    /// Candidates visited; defaults to the pool size.
    pub max_steps: Option<usize>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            k_min: *inference::DEFAULT_POOL_K.start(),
            k_max: *inference::DEFAULT_POOL_K.end(),
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a `train`, `eval` or `search` run needs. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds model initialization, batch order, anchor jitter and search order.
    pub seed: u64,
    pub anchors: AnchorSection,
    pub thresholds: MatchThresholds,
    pub generator: GeneratorSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub drop_boxes: DropSection,
    pub search: SearchSection,
    pub predict: PredictOptions,
    pub paths: PathSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.anchors.configuration().map_err(cfg)?;
        MatchThresholds::new(self.thresholds.t_pos, self.thresholds.t_neg).map_err(cfg)?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("train.lr must be > 0 and train.momentum in [0, 1)".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(t.augment_delta >= 0.0) || !(t.smooth_l1_beta > 0.0) || !(t.clip_grad_norm >= 0.0) {
            return Err(Error::Config(
                "train.augment_delta and train.clip_grad_norm must be >= 0, train.smooth_l1_beta > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.focal_alpha) || !(t.focal_gamma >= 0.0) {
            return Err(Error::Config("train.focal_alpha must be in [0, 1] and train.focal_gamma >= 0".into()));
        }
        if self.generator.m == 0 {
            return Err(Error::Config("generator.m must be >= 1".into()));
        }
        let m = &self.model;
        if m.feat_channels == 0 || m.stem_channels == 0 || m.num_levels == 0 {
            return Err(Error::Config("model widths and num_levels must be >= 1".into()));
        }
        let d = &self.drop_boxes;
        if d.enabled && !(d.min_sqrt_hw < d.max_sqrt_hw && d.log_ratio_bound > 0.0) {
            return Err(Error::Config("drop_boxes needs min_sqrt_hw < max_sqrt_hw and log_ratio_bound > 0".into()));
        }
        if self.search.k_min > self.search.k_max {
            return Err(Error::Config("search.k_min must be <= search.k_max".into()));
        }
        let p = &self.predict;
        if !(0.0..1.0).contains(&p.score_thresh) || !(0.0..=1.0).contains(&p.nms_iou) {
            return Err(Error::Config("predict.score_thresh must be in [0, 1) and predict.nms_iou in [0, 1]".into()));
        }
        Ok(())
    }

    /// Sets the run seed (used everywhere a seed is needed).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Training anchors encoded against their own standard box.
    pub fn training_anchors(&self) -> Result<(Vec<AnchorEncoding>, StandardBox)> {
        let c = self.anchors.configuration()?;
        Ok((c.encodings(), c.standard))
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let (encs, standard) = self.training_anchors()?;
        let head = if self.model.baseline {
            HeadMode::Baseline { anchors: encs }
        } else {
            HeadMode::Meta {
                variant: self.generator.variant,
                hidden: self.generator.m,
            }
        };
        Ok(ModelConfig {
            num_classes,
            feat_channels: self.model.feat_channels,
            stem_channels: self.model.stem_channels,
            num_levels: self.model.num_levels,
            tower_depth: self.model.tower_depth,
            head,
            standard,
        })
    }

    /// Builds a fresh model and a trainer for it.
    pub fn trainer(&self, num_classes: usize) -> Result<Trainer> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let model = Model::new(self.model_config(num_classes)?, &mut rng)?;
        let (encs, _) = self.training_anchors()?;
        let train = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        Trainer::new(model, encs, train, self.thresholds, self.drop_boxes.band())
    }

    /// Trains for `train.steps` steps on `samples`.
    pub fn train(
        &self,
        samples: &[Sample],
        num_classes: usize,
        on_step: impl FnMut(&StepStats),
    ) -> Result<(Model, Vec<StepStats>)> {
        let data: Vec<(Tensor, Vec<GroundTruthBox>)> =
            samples.iter().map(|s| (s.image.clone(), s.boxes.clone())).collect();
        let mut t = self.trainer(num_classes)?;
        let log = t.fit(&data, self.train.steps, on_step)?;
        Ok((t.model, log))
    }
}

/// An inference anchor list: explicit encodings, or a `scales x ratios`
/// configuration encoded against the model's standard box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorFile {
    List {
        anchors: Vec<AnchorEncoding>,
    },
    Grid {
        n_scales: usize,
        ratios: Vec<f64>,
        base_size: f64,
    },
}

impl AnchorFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {{\"anchors\": [{{\"eh\", \"ew\"}}, ...]}} or {{\"n_scales\", \"ratios\", \"base_size\"}}: {e}"),
        })
    }

    /// Encodings relative to the level-0 standard box `standard`.
    pub fn resolve(&self, standard: &StandardBox) -> Result<Vec<AnchorEncoding>> {
        let out = match self {
            AnchorFile::List { anchors } => anchors.clone(),
            AnchorFile::Grid {
                n_scales,
                ratios,
                base_size,
            } => anchors::build_configuration(*n_scales, ratios, *base_size)?.encodings_against(standard),
        };
        if out.is_empty() {
            return Err(Error::invalid("anchor file lists no anchors"));
        }
        Ok(out)
    }
}

/// Encodings of a `scales x ratios` grid against the model's standard box.
pub fn grid_anchors(model: &Model, n_scales: usize, ratios: &[f64], base_size: f64) -> Result<Vec<AnchorEncoding>> {
    Ok(anchors::build_configuration(n_scales, ratios, base_size)?.encodings_against(&model.config.standard))
}

/// Final detections for every sample.
pub fn detect_all(model: &Model, samples: &[Sample], anchors: &[AnchorEncoding], opts: &PredictOptions) -> Result<Vec<Vec<inference::Detection>>> {
    samples.iter().map(|s| inference::detect(model, &s.image, anchors, opts)).collect()
}

pub fn evaluate(model: &Model, samples: &[Sample], anchors: &[AnchorEncoding], opts: &PredictOptions) -> Result<EvalResult> {
    let dets = detect_all(model, samples, anchors, opts)?;
    let gts: Vec<Vec<GroundTruthBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    evaluation::mmap(&dets, &gts, model.config.num_classes)
}
