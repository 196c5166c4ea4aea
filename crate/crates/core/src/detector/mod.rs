//! Toy backbone, feature pyramid and detection heads whose last layer is either
//! generated from anchor encodings or, for the baseline, learned per
//! predefined anchor.

mod loss;
mod train;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorBox, AnchorEncoding, StandardBox};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::{
    encodings_tensor, prior_bias, FilterBank, GeneratorParams, GeneratorVariant, GeneratorVars, HeadBlock,
    HeadGeometry,
};
use crate::matching::LevelAnchors;
use crate::tensor::{ParamStore, Tensor};

pub use loss::{focal_loss, smooth_l1, LossNormalization, LossTargets};
pub use train::{StepStats, TrainConfig, Trainer};

/// Stride of the finest pyramid level relative to the input image.
pub const FINEST_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadMode {
    /// Head weights generated from anchor encodings.
    Meta { variant: GeneratorVariant, hidden: usize },
    /// One learned filter set per predefined anchor.
    Baseline { anchors: Vec<AnchorEncoding> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub feat_channels: usize,
    pub stem_channels: usize,
    pub num_levels: usize,
    pub tower_depth: usize,
    pub head: HeadMode,
    /// Standard box of the finest level (level index 0).
    pub standard: StandardBox,
}

impl ModelConfig {
    pub fn geometry(&self) -> HeadGeometry {
        HeadGeometry {
            num_classes: self.num_classes,
            feat_channels: self.feat_channels,
        }
    }

    pub fn stride(&self, level: usize) -> usize {
        FINEST_STRIDE << level
    }

    /// Input extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.stride(self.num_levels - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feat_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("class count and channel widths must be >= 1".into()));
        }
        if self.num_levels == 0 {
            return Err(Error::Config("at least one pyramid level is required".into()));
        }
        if self.standard.level != 0 || !(self.standard.h > 0.0 && self.standard.w > 0.0) {
            return Err(Error::Config("standard box must be positive and refer to level 0".into()));
        }
        match &self.head {
            HeadMode::Meta { hidden, .. } if *hidden == 0 => {
                Err(Error::Config("generator hidden width must be >= 1".into()))
            }
            HeadMode::Baseline { anchors } if anchors.is_empty() => {
                Err(Error::Config("baseline head needs at least one anchor".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-level feature maps, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Raw head predictions of one anchor on one level.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub cls_logits: Tensor,
    pub reg_deltas: Tensor,
    pub anchor: AnchorEncoding,
    pub level: usize,
}

/// One 3x3 convolution per branch with the given bank; `feature` is the
/// output of the shared head tower.
pub fn head_forward(feature: &Tensor, bank: &FilterBank) -> Result<(Tensor, Tensor)> {
    let c = feature.shape().first().copied().unwrap_or(0);
    if bank.cls_filters.shape()[1] != c {
        return Err(Error::shape(
            "head_forward",
            format!("channel count: bank expects {}, feature has {c}", bank.cls_filters.shape()[1]),
        ));
    }
    let cls = crate::autograd::conv2d_3x3(feature, &bank.cls_filters, Some(&bank.cls_bias))?;
    let reg = crate::autograd::conv2d_3x3(feature, &bank.reg_filters, Some(&bank.reg_bias))?;
    Ok((cls, reg))
}

/// Last-layer weights for a batch of `A` anchors, stacked anchor-major.
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    /// `[A * C, C_feat, 3, 3]`
    pub cls_w: Var,
    /// `[A * C]`
    pub cls_b: Var,
    /// `[A * 4, C_feat, 3, 3]`
    pub reg_w: Var,
    /// `[A * 4]`
    pub reg_b: Var,
}

#[derive(Debug, Clone)]
enum HeadVars {
    Shared(BankVars),
    PerImage {
        cls: GeneratorVars,
        reg: GeneratorVars,
        encodings: Var,
    },
}

/// Model parameters bound onto a graph for a fixed anchor set.
#[derive(Debug, Clone)]
pub struct ModelVars {
    backbone: Vec<(Var, Var)>,
    tower: Vec<(Var, Var)>,
    head: HeadVars,
    num_anchors: usize,
}

/// Graph outputs of one level: `cls [A * C, H, W]`, `reg [A * 4, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub level: usize,
    pub feature: Var,
    pub cls: Var,
    pub reg: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn conv_name(prefix: &str, i: impl std::fmt::Display) -> (String, String) {
    (format!("{prefix}{i}.w"), format!("{prefix}{i}.b"))
}

fn he_conv<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, i: impl std::fmt::Display, c_out: usize, c_in: usize, rng: &mut R) -> Result<()> {
    let (w, b) = conv_name(prefix, i);
    let bound = (6.0 / (c_in * 9) as f64).sqrt();
    store.insert(w, Tensor::uniform(vec![c_out, c_in, 3, 3], bound, rng))?;
    store.insert(b, Tensor::zeros(vec![c_out]))
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let (cs, cf) = (config.stem_channels, config.feat_channels);
        he_conv(&mut p, "backbone.", "stem", cs, 3, rng)?;
        he_conv(&mut p, "backbone.", "down", cf, cs, rng)?;
        for l in 0..config.num_levels {
            he_conv(&mut p, "backbone.level", l, cf, cf, rng)?;
        }
        for k in 0..config.tower_depth {
            he_conv(&mut p, "tower.", k, cf, cf, rng)?;
        }
        let geom = config.geometry();
        match &config.head {
            HeadMode::Meta { variant, hidden } => {
                GeneratorParams::init(&geom, HeadBlock::Cls, *hidden, *variant, rng)?
                    .store_into(&mut p, HeadBlock::Cls.prefix())?;
                GeneratorParams::init(&geom, HeadBlock::Reg, *hidden, *variant, rng)?
                    .store_into(&mut p, HeadBlock::Reg.prefix())?;
            }
            HeadMode::Baseline { anchors } => {
                let a = anchors.len();
                let bound = 1.0 / ((cf * 9) as f64).sqrt();
                let c = config.num_classes;
                p.insert("fixed.cls.w", Tensor::uniform(vec![a * c, cf, 3, 3], bound, rng))?;
                p.insert("fixed.cls.b", Tensor::full(vec![a * c], prior_bias()))?;
                p.insert("fixed.reg.w", Tensor::uniform(vec![a * 4, cf, 3, 3], bound, rng))?;
                p.insert("fixed.reg.b", Tensor::uniform(vec![a * 4], bound, rng))?;
            }
        }
        Ok(Model { config, params: p })
    }

    pub fn geometry(&self) -> HeadGeometry {
        self.config.geometry()
    }

    pub fn level_standard(&self, level: usize) -> StandardBox {
        anchors::level_standard(&self.config.standard, level).expect("levels count up from 0")
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self.config.head, HeadMode::Baseline { .. })
    }

    /// The anchors a baseline model was built with; `None` for generated heads.
    pub fn fixed_anchors(&self) -> Option<&[AnchorEncoding]> {
        match &self.config.head {
            HeadMode::Baseline { anchors } => Some(anchors),
            HeadMode::Meta { .. } => None,
        }
    }

    /// Pixel-space anchors of `encodings` placed on the grid of `level`.
    pub fn place_anchors(&self, encodings: &[AnchorEncoding], level: usize, grid_h: usize, grid_w: usize) -> Result<LevelAnchors> {
        let std = self.level_standard(level);
        let boxes = encodings
            .iter()
            .map(|e| anchors::decode_encoding(e, &std))
            .collect::<Result<Vec<AnchorBox>>>()?;
        Ok(LevelAnchors {
            level,
            stride: self.config.stride(level) as f64,
            grid_h,
            grid_w,
            boxes,
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match shape {
            [3, h, w] if h % m == 0 && w % m == 0 && *h > 0 && *w > 0 => Ok(()),
            [3, h, w] => Err(Error::shape(
                "backbone",
                format!("image size {h}x{w} is not a multiple of {m}"),
            )),
            _ => Err(Error::shape("backbone", format!("image must be [3, H, W], got {shape:?}"))),
        }
    }

    /// Binds all parameters onto `g` for the given anchor set. For generated
    /// heads the encodings pass through the shared generators once and the
    /// same bank serves every level.
    pub fn bind(&self, g: &mut Graph, encodings: &[AnchorEncoding]) -> Result<ModelVars> {
        if encodings.is_empty() {
            return Err(Error::invalid("anchor list is empty"));
        }
        let mut backbone = Vec::new();
        for name in ["stem".to_string(), "down".to_string()]
            .into_iter()
            .chain((0..self.config.num_levels).map(|l| format!("level{l}")))
        {
            let (w, b) = conv_name("backbone.", name);
            backbone.push((g.param(&self.params, &w)?, g.param(&self.params, &b)?));
        }
        let mut tower = Vec::new();
        for k in 0..self.config.tower_depth {
            let (w, b) = conv_name("tower.", k);
            tower.push((g.param(&self.params, &w)?, g.param(&self.params, &b)?));
        }
        let geom = self.geometry();
        let head = match &self.config.head {
            HeadMode::Meta { variant, .. } => {
                let cls = GeneratorVars::bind(g, &self.params, HeadBlock::Cls.prefix())?;
                let reg = GeneratorVars::bind(g, &self.params, HeadBlock::Reg.prefix())?;
                let enc = g.constant(encodings_tensor(encodings));
                match variant {
                    GeneratorVariant::DataIndependent => {
                        HeadVars::Shared(banks_from_generators(g, &geom, &cls, &reg, enc, None)?)
                    }
                    GeneratorVariant::DataDependent => HeadVars::PerImage { cls, reg, encodings: enc },
                }
            }
            HeadMode::Baseline { anchors } => {
                if anchors.as_slice() != encodings {
                    return Err(Error::invalid(
                        "baseline heads only run on the anchors they were trained with",
                    ));
                }
                HeadVars::Shared(BankVars {
                    cls_w: g.param(&self.params, "fixed.cls.w")?,
                    cls_b: g.param(&self.params, "fixed.cls.b")?,
                    reg_w: g.param(&self.params, "fixed.reg.w")?,
                    reg_b: g.param(&self.params, "fixed.reg.b")?,
                })
            }
        };
        Ok(ModelVars {
            backbone,
            tower,
            head,
            num_anchors: encodings.len(),
        })
    }

    fn backbone_graph(&self, g: &mut Graph, vars: &ModelVars, image: Var) -> Result<Vec<Var>> {
        let conv_relu = |g: &mut Graph, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = g.conv2d_3x3(x, w, Some(b))?;
            Ok(g.relu(y))
        };
        let x = conv_relu(g, image, vars.backbone[0])?;
        let x = g.avg_pool2(x)?;
        let x = conv_relu(g, x, vars.backbone[1])?;
        let mut x = g.avg_pool2(x)?;
        let mut levels = Vec::with_capacity(self.config.num_levels);
        for l in 0..self.config.num_levels {
            if l > 0 {
                x = g.avg_pool2(x)?;
            }
            x = conv_relu(g, x, vars.backbone[2 + l])?;
            levels.push(x);
        }
        Ok(levels)
    }

    /// Full forward pass of one image (pixel values in `[0, 1]`).
    pub fn forward_image(&self, g: &mut Graph, vars: &ModelVars, image: &Tensor) -> Result<Vec<LevelOutput>> {
        self.check_image(image.shape())?;
        let mut centered = image.clone();
        centered.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let img = g.constant(centered);
        let pyramid = self.backbone_graph(g, vars, img)?;
        let geom = self.geometry();
        let mut out = Vec::with_capacity(pyramid.len());
        for (level, &feature) in pyramid.iter().enumerate() {
            let mut t = feature;
            for &(w, b) in &vars.tower {
                let y = g.conv2d_3x3(t, w, Some(b))?;
                t = g.relu(y);
            }
            let bank = match &vars.head {
                HeadVars::Shared(b) => *b,
                HeadVars::PerImage { cls, reg, encodings } => {
                    let pooled = g.global_avg_pool(feature)?;
                    banks_from_generators(g, &geom, cls, reg, *encodings, Some(pooled))?
                }
            };
            let cls = g.conv2d_3x3(t, bank.cls_w, Some(bank.cls_b))?;
            let reg = g.conv2d_3x3(t, bank.reg_w, Some(bank.reg_b))?;
            let s = g.shape(t);
            let (grid_h, grid_w) = (s[1], s[2]);
            out.push(LevelOutput {
                level,
                feature,
                cls,
                reg,
                grid_h,
                grid_w,
            });
        }
        debug_assert!(out.iter().all(|o| g.shape(o.cls)[0] == vars.num_anchors * geom.num_classes));
        Ok(out)
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_image(image.shape())?;
        let mut g = Graph::no_grad();
        let anchors = self
            .fixed_anchors()
            .map(<[AnchorEncoding]>::to_vec)
            .unwrap_or_else(|| vec![AnchorEncoding::STANDARD]);
        let vars = self.bind(&mut g, &anchors)?;
        let mut centered = image.clone();
        centered.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let img = g.constant(centered);
        let levels = self.backbone_graph(&mut g, &vars, img)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Per-anchor, per-level head outputs (explicit form of the batched
    /// forward used in training and prediction).
    pub fn head_outputs(&self, image: &Tensor, encodings: &[AnchorEncoding]) -> Result<Vec<HeadOutput>> {
        let mut g = Graph::no_grad();
        let vars = self.bind(&mut g, encodings)?;
        let levels = self.forward_image(&mut g, &vars, image)?;
        let c = self.config.num_classes;
        let mut out = Vec::new();
        for lo in levels {
            let hw = lo.grid_h * lo.grid_w;
            let cls = g.value(lo.cls).data();
            let reg = g.value(lo.reg).data();
            for (a, enc) in encodings.iter().enumerate() {
                out.push(HeadOutput {
                    cls_logits: Tensor::new(vec![c, lo.grid_h, lo.grid_w], cls[a * c * hw..(a + 1) * c * hw].to_vec())?,
                    reg_deltas: Tensor::new(vec![4, lo.grid_h, lo.grid_w], reg[a * 4 * hw..(a + 1) * 4 * hw].to_vec())?,
                    anchor: *enc,
                    level: lo.level,
                });
            }
        }
        Ok(out)
    }

    /// Writes `<path>` (parameters) and `<path>.json` (architecture).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let meta = sidecar(path);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&meta, json + "\n").map_err(|e| Error::io(meta, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = sidecar(path);
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: meta.clone(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        let params = ParamStore::load(path)?;
        Ok(Model { config, params })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Runs both generators on a batch of encodings and slices the weight rows
/// into stacked filter banks.
fn banks_from_generators(
    g: &mut Graph,
    geom: &HeadGeometry,
    cls: &GeneratorVars,
    reg: &GeneratorVars,
    encodings: Var,
    pooled: Option<Var>,
) -> Result<BankVars> {
    let a = g.shape(encodings)[0];
    let (c, f) = (geom.num_classes, geom.feat_channels);
    let cls_rows = cls.generate_rows(g, encodings, pooled)?;
    let reg_rows = reg.generate_rows(g, encodings, pooled)?;
    let cls_w = g.col_slice(cls_rows, 0, geom.cls_filter_len())?;
    let cls_w = g.reshape(cls_w, vec![a * c, f, 3, 3])?;
    let cls_b = g.col_slice(cls_rows, geom.cls_filter_len(), c)?;
    let cls_b = g.reshape(cls_b, vec![a * c])?;
    let reg_w = g.col_slice(reg_rows, 0, geom.reg_filter_len())?;
    let reg_w = g.reshape(reg_w, vec![a * 4, f, 3, 3])?;
    let reg_b = g.col_slice(reg_rows, geom.reg_filter_len(), 4)?;
    let reg_b = g.reshape(reg_b, vec![a * 4])?;
    Ok(BankVars {
        cls_w,
        cls_b,
        reg_w,
        reg_b,
    })
}
